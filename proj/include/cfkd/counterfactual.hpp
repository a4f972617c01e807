#pragma once

// Counterfactual search: gradient ascent on log f(decode(z))_target in the
// latent space of the flow (or directly on x for the adversarial baseline),
// stopping at the first iterate whose target probability reaches the
// requested confidence.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "cfkd/checkpoint.hpp"
#include "cfkd/classifier.hpp"
#include "cfkd/error.hpp"
#include "cfkd/flow.hpp"
#include "cfkd/image.hpp"
#include "cfkd/png_io.hpp"

namespace cfkd {

enum class SearchMode { latent, input_space };

inline std::string to_string(SearchMode m) {
  return m == SearchMode::latent ? "latent" : "input_space";
}
inline SearchMode search_mode_from_string(const std::string& s) {
  if (s == "latent") return SearchMode::latent;
  if (s == "input_space") return SearchMode::input_space;
  throw ConfigError("unknown search mode '" + s + "'", "search.mode");
}

struct SearchConfig {
  double target_confidence = 0.8;
  int max_steps = 500;
  double step_size = 0.5;
  SearchMode mode = SearchMode::latent;
  // A step that lands above overshoot_confidence is retried at half the
  // step size (at most max_halvings times per search).
  bool halve_on_overshoot = true;
  double overshoot_confidence = 0.95;
  int max_halvings = 20;

  void validate() const {
    if (!(target_confidence > 0.5 && target_confidence < 1.0))
      throw ConfigError("target_confidence must be in (0.5, 1)",
                        "search.target_confidence");
    if (max_steps < 0)
      throw ConfigError("max_steps must be >= 0", "search.max_steps");
    if (!(step_size > 0.0))
      throw ConfigError("step_size must be > 0", "search.step_size");
  }

  nlohmann::json to_json() const {
    return {{"target_confidence", target_confidence},
            {"max_steps", max_steps},
            {"step_size", step_size},
            {"mode", to_string(mode)},
            {"halve_on_overshoot", halve_on_overshoot},
            {"overshoot_confidence", overshoot_confidence},
            {"max_halvings", max_halvings}};
  }
  static SearchConfig from_json(const nlohmann::json& j) {
    SearchConfig c;
    c.target_confidence = j.value("target_confidence", c.target_confidence);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.step_size = j.value("step_size", c.step_size);
    c.mode = search_mode_from_string(j.value("mode", to_string(c.mode)));
    c.halve_on_overshoot = j.value("halve_on_overshoot", c.halve_on_overshoot);
    c.overshoot_confidence =
        j.value("overshoot_confidence", c.overshoot_confidence);
    c.max_halvings = j.value("max_halvings", c.max_halvings);
    return c;
  }
};

struct CounterfactualRequest {
  ImageTensor x;
  int y = 0;
  int y_target = 1;
  SearchConfig config;

  void validate() const {
    if (y_target == y)
      throw ConfigError("y_target must differ from y", "y_target");
    config.validate();
  }
};

enum class CfStatus { converged, failed };

inline std::string to_string(CfStatus s) {
  return s == CfStatus::converged ? "converged" : "failed";
}

struct CounterfactualRecord {
  std::string record_id;
  std::size_t sample_index = 0;  // index into the source dataset
  ImageTensor x;
  ImageTensor x_prime;
  int y = 0;
  int y_target = 1;
  int steps_taken = 0;
  double final_confidence = 0.0;
  std::vector<double> delta_z;  // z' - z; zeros in input_space mode
  CfStatus status = CfStatus::failed;
  std::string diagnostic;

  bool converged() const { return status == CfStatus::converged; }
};

namespace detail {

struct SearchPoint {
  std::vector<double> probabilities;
  std::vector<double> gradient;  // d log f_target / d (search variable)
};

inline SearchPoint evaluate(const Classifier& f, const InvertibleGenerator* g,
                            SearchMode mode, std::span<const double> v,
                            int target, ImageShape shape) {
  SearchPoint p;
  if (mode == SearchMode::latent) {
    const ImageTensor x = g->decode(v);
    auto lp = f.log_prob_gradient(x, target);
    p.probabilities = std::move(lp.probabilities);
    p.gradient = g->decode_vjp(v, lp.gradient);
  } else {
    const ImageTensor x(shape, std::vector<double>(v.begin(), v.end()));
    auto lp = f.log_prob_gradient(x, target);
    p.probabilities = std::move(lp.probabilities);
    p.gradient = std::move(lp.gradient);
  }
  return p;
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(),
                     [](double a) { return std::isfinite(a); });
}

}  // namespace detail

// Never throws for non-convergence or numerical trouble mid-search; those
// come back as status = failed with a diagnostic.
inline CounterfactualRecord search_counterfactual(
    const Classifier& f, const InvertibleGenerator* g,
    const CounterfactualRequest& req) {
  req.validate();
  const auto& cfg = req.config;
  if (req.y_target < 0 || req.y_target >= f.num_classes())
    throw InputError("y_target out of range");
  if (!(req.x.shape() == f.input_shape()))
    throw InputError("request image shape " + req.x.shape().str() +
                     " does not match classifier input " +
                     f.input_shape().str());
  const bool latent = cfg.mode == SearchMode::latent;
  if (latent) {
    if (!g) throw ConfigError("latent search needs a generator");
    if (!(g->shape() == f.input_shape()))
      throw ConfigError("generator shape " + g->shape().str() +
                        " does not match classifier input " +
                        f.input_shape().str());
  }

  CounterfactualRecord rec;
  rec.x = req.x;
  rec.y = req.y;
  rec.y_target = req.y_target;
  rec.delta_z.assign(req.x.size(), 0.0);

  std::vector<double> v0 =
      latent ? g->encode(req.x) : std::vector<double>(req.x.vector());
  std::vector<double> v = v0;
  const ImageShape shape = req.x.shape();
  auto finish = [&](CfStatus status, std::string diag) {
    rec.status = status;
    rec.diagnostic = std::move(diag);
    try {
      rec.x_prime = latent ? g->decode(v) : ImageTensor(shape, v);
    } catch (const NumericalError& e) {
      rec.x_prime = req.x;
      rec.status = CfStatus::failed;
      rec.diagnostic += std::string(rec.diagnostic.empty() ? "" : "; ") + e.what();
    }
    if (latent)
      for (std::size_t i = 0; i < v.size(); ++i) rec.delta_z[i] = v[i] - v0[i];
    return rec;
  };

  detail::SearchPoint cur;
  try {
    cur = detail::evaluate(f, g, cfg.mode, v, req.y_target, shape);
  } catch (const NumericalError& e) {
    return finish(CfStatus::failed, e.what());
  }
  double step = cfg.step_size;
  int halvings = 0;
  while (cur.probabilities[req.y_target] < cfg.target_confidence &&
         rec.steps_taken < cfg.max_steps) {
    if (!detail::all_finite(cur.gradient)) {
      rec.final_confidence = cur.probabilities[req.y_target];
      return finish(CfStatus::failed, "non-finite gradient at step " +
                                          std::to_string(rec.steps_taken));
    }
    std::vector<double> next(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
      next[i] = v[i] + step * cur.gradient[i];
    detail::SearchPoint cand;
    try {
      cand = detail::evaluate(f, g, cfg.mode, next, req.y_target, shape);
    } catch (const NumericalError& e) {
      rec.final_confidence = cur.probabilities[req.y_target];
      return finish(CfStatus::failed, std::string(e.what()) + " at step " +
                                          std::to_string(rec.steps_taken));
    }
    if (cfg.halve_on_overshoot &&
        cand.probabilities[req.y_target] > cfg.overshoot_confidence &&
        halvings < cfg.max_halvings) {
      step *= 0.5;
      ++halvings;
      continue;
    }
    v = std::move(next);
    cur = std::move(cand);
    ++rec.steps_taken;
  }
  rec.final_confidence = cur.probabilities[req.y_target];
  const bool reached = rec.final_confidence >= cfg.target_confidence &&
                       argmax(cur.probabilities) == req.y_target;
  if (reached) return finish(CfStatus::converged, {});
  return finish(CfStatus::failed,
                "target confidence not reached within " +
                    std::to_string(cfg.max_steps) + " steps (final " +
                    std::to_string(rec.final_confidence) + ")");
}

// Binary: the other class. Multiclass: most probable class other than y,
// ties to the lowest index.
inline int choose_target_class(const Classifier& f, const ImageTensor& x,
                               int y) {
  if (f.num_classes() == 2) return 1 - y;
  const auto p = f.predict(x);
  int best = -1;
  for (int c = 0; c < f.num_classes(); ++c) {
    if (c == y) continue;
    if (best < 0 || p[c] > p[best]) best = c;
  }
  return best;
}

struct ExplainItem {
  std::string record_id;
  std::size_t sample_index = 0;
  const ImageTensor* x = nullptr;
  int y = 0;
};

struct BatchSummary {
  std::size_t generated = 0;
  std::size_t converged = 0;
  std::size_t failed = 0;
};

inline BatchSummary summarize(std::span<const CounterfactualRecord> records) {
  BatchSummary s;
  s.generated = records.size();
  for (const auto& r : records) (r.converged() ? s.converged : s.failed)++;
  return s;
}

// One record per item, in input order. Searches are independent, so they
// may run on several threads without affecting the result.
inline std::vector<CounterfactualRecord> batch_explain(
    const Classifier& f, const InvertibleGenerator* g,
    std::span<const ExplainItem> items, const SearchConfig& config,
    unsigned threads = 1) {
  config.validate();
  std::vector<CounterfactualRecord> out(items.size());
  auto work = [&](std::size_t i) {
    const auto& it = items[i];
    CounterfactualRequest req{*it.x, it.y, choose_target_class(f, *it.x, it.y),
                              config};
    out[i] = search_counterfactual(f, g, req);
    out[i].record_id = it.record_id;
    out[i].sample_index = it.sample_index;
  };
  threads = std::max(1u, std::min<unsigned>(threads, items.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < items.size(); ++i) work(i);
    return out;
  }
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      for (std::size_t i = t; i < items.size(); i += threads) work(i);
    });
  for (auto& th : pool) th.join();
  return out;
}

// n distinct indices drawn from `from` with a seeded shuffle (order of the
// returned indices is the draw order).
inline std::vector<std::size_t> sample_without_replacement(
    std::vector<std::size_t> from, std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(from.begin(), from.end(), rng);
  from.resize(std::min(n, from.size()));
  return from;
}

// ---- persistence -----------------------------------------------------------
// <dir>/<name>.jsonl holds one JSON object per record; images go to
// <dir>/<name>_png/<id>_{x,xprime}.png and the exact x' and delta_z values to
// <dir>/<name>.tensors (checkpoint container).

inline void write_records(const std::filesystem::path& dir,
                          const std::string& name,
                          std::span<const CounterfactualRecord> records) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / (name + "_png"));
  std::ofstream out(dir / (name + ".jsonl"));
  Checkpoint tensors;
  tensors.header = {{"kind", "counterfactual_tensors"}};
  for (const auto& r : records) {
    const std::string xp = name + "_png/" + r.record_id + "_x.png";
    const std::string xpp = name + "_png/" + r.record_id + "_xprime.png";
    write_png(dir / xp, r.x);
    write_png(dir / xpp, r.x_prime.clipped());
    nlohmann::json j = {{"record_id", r.record_id},
                        {"sample_index", r.sample_index},
                        {"y", r.y},
                        {"y_target", r.y_target},
                        {"steps_taken", r.steps_taken},
                        {"final_confidence", r.final_confidence},
                        {"status", to_string(r.status)},
                        {"diagnostic", r.diagnostic},
                        {"x_path", xp},
                        {"x_prime_path", xpp},
                        {"tensor_file", name + ".tensors"}};
    out << j.dump() << "\n";
    tensors.arrays.emplace_back("x/" + r.record_id, r.x.vector());
    tensors.arrays.emplace_back("x_prime/" + r.record_id, r.x_prime.vector());
    tensors.arrays.emplace_back("delta_z/" + r.record_id, r.delta_z);
  }
  write_checkpoint(dir / (name + ".tensors"), tensors);
}

inline std::vector<CounterfactualRecord> read_records(
    const std::filesystem::path& dir, const std::string& name,
    ImageShape shape) {
  std::ifstream in(dir / (name + ".jsonl"));
  if (!in) throw ConfigError("cannot open " + (dir / (name + ".jsonl")).string());
  const Checkpoint tensors = read_checkpoint(dir / (name + ".tensors"));
  std::vector<CounterfactualRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    CounterfactualRecord r;
    r.record_id = j.at("record_id");
    r.sample_index = j.at("sample_index");
    r.y = j.at("y");
    r.y_target = j.at("y_target");
    r.steps_taken = j.at("steps_taken");
    r.final_confidence = j.at("final_confidence");
    r.status = j.at("status") == "converged" ? CfStatus::converged
                                             : CfStatus::failed;
    r.diagnostic = j.at("diagnostic");
    r.x = ImageTensor(shape, tensors.array("x/" + r.record_id));
    r.x_prime = ImageTensor(shape, tensors.array("x_prime/" + r.record_id));
    r.delta_z = tensors.array("delta_z/" + r.record_id);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace cfkd
