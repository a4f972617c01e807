#pragma once

// Config file handling and the end-to-end pipeline shared by the CLI, the
// service and the sweep: dataset -> poisoned subset -> classifier, oracle and
// flow (cached on disk) -> distillation run directory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfkd/cfkd_loop.hpp"
#include "cfkd/classifier.hpp"
#include "cfkd/confounders.hpp"
#include "cfkd/error.hpp"
#include "cfkd/evaluation.hpp"
#include "cfkd/flow.hpp"
#include "cfkd/teachers.hpp"

namespace cfkd {

struct SweepConfig {
  std::vector<std::string> kinds{"corner_tag", "intensity_shift", "color_shift"};
  std::vector<double> alphas{0.5, 0.6, 0.8, 1.0};
  std::vector<std::uint64_t> seeds{0, 1, 2};

  nlohmann::json to_json() const {
    return {{"kinds", kinds}, {"alphas", alphas}, {"seeds", seeds}};
  }
};

struct PipelineConfig {
  ConfounderKind kind = ConfounderKind::intensity_shift;
  BaseSampleSpec dataset;
  SplitSizes sizes;
  std::uint64_t dataset_seed = 1;
  PoisonSpec poison;
  ArchSpec arch;
  TrainConfig classifier;
  TrainConfig oracle;
  double oracle_margin = 0.0;
  FlowConfig flow{.epochs = 2};
  SearchConfig search;
  DistillConfig distill;
  SweepConfig sweep;

  // Per-run seed: poisoned subset, classifier init and distillation. The
  // pool, oracle and flow keep their own seeds and are shared across runs.
  void apply_seed(std::uint64_t s) {
    poison.seed = s;
    classifier.seed = s;
    distill.seed = s;
  }

  void validate() const;
  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load(const std::filesystem::path& path);
};

namespace detail {

inline nlohmann::json train_config_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"learning_rate", t.learning_rate},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"seed", t.seed},
          {"fine_tune", t.fine_tune}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j,
                                          TrainConfig t) {
  t.epochs = j.value("epochs", t.epochs);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.momentum = j.value("momentum", t.momentum);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.seed = j.value("seed", t.seed);
  t.fine_tune = j.value("fine_tune", t.fine_tune);
  return t;
}

inline const char* json_kind(const nlohmann::json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

// Rejects unknown keys and values whose JSON type differs from the default.
// Integers are accepted where floats are expected, not the other way round.
inline void check_against(const nlohmann::json& given,
                          const nlohmann::json& defaults,
                          const std::string& path) {
  if (!given.is_object())
    throw ConfigError("expected an object", path);
  for (const auto& [key, value] : given.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) throw ConfigError("unknown field", p);
    const auto& d = defaults.at(key);
    if (d.is_object()) {
      check_against(value, d, p);
      continue;
    }
    const bool ok =
        (d.is_boolean() && value.is_boolean()) ||
        (d.is_string() && value.is_string()) ||
        (d.is_array() && value.is_array()) ||
        (d.is_number_float() && value.is_number()) ||
        (d.is_number_unsigned() && value.is_number_unsigned()) ||
        (d.is_number_integer() && !d.is_number_unsigned() &&
         value.is_number_integer());
    if (!ok)
      throw ConfigError(std::string("expected ") +
                            (d.is_number_unsigned() ? "non-negative integer"
                             : d.is_number_integer() ? "integer"
                                                     : json_kind(d)) +
                            ", got " + json_kind(value),
                        p);
  }
}

inline void rethrow_in(const std::string& section,
                       const std::function<void()>& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    const std::string& f = e.field();
    if (f.rfind(section, 0) == 0) throw;
    throw ConfigError(e.what(), f.empty() ? section : section + "." + f);
  }
}

}  // namespace detail

inline nlohmann::json PipelineConfig::to_json() const {
  auto ds = dataset.to_json();
  ds["kind"] = to_string(kind);
  ds["train"] = sizes.train;
  ds["validation"] = sizes.validation;
  ds["test"] = sizes.test;
  ds["seed"] = dataset_seed;
  auto cl = detail::train_config_json(classifier);
  cl["arch"] = arch.to_json();
  auto orc = detail::train_config_json(oracle);
  orc["margin"] = oracle_margin;
  auto dist = distill.to_json();
  return {{"dataset", ds},
          {"poison",
           {{"alpha", poison.alpha},
            {"train", poison.train_size},
            {"validation", poison.validation_size},
            {"seed", poison.seed}}},
          {"classifier", cl},
          {"oracle", orc},
          {"flow", flow.to_json()},
          {"search", search.to_json()},
          {"distill", dist},
          {"sweep", sweep.to_json()}};
}

inline PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
  const PipelineConfig defaults;
  detail::check_against(j, defaults.to_json(), "");
  PipelineConfig c;
  const auto sec = [&](const char* name) {
    return j.contains(name) ? j.at(name) : nlohmann::json::object();
  };
  detail::rethrow_in("dataset", [&] {
    const auto d = sec("dataset");
    c.kind = confounder_kind_from_string(d.value("kind", to_string(c.kind)));
    c.dataset = BaseSampleSpec::from_json(d);
    c.sizes.train = d.value("train", c.sizes.train);
    c.sizes.validation = d.value("validation", c.sizes.validation);
    c.sizes.test = d.value("test", c.sizes.test);
    c.dataset_seed = d.value("seed", c.dataset_seed);
  });
  {
    const auto p = sec("poison");
    c.poison.alpha = p.value("alpha", c.poison.alpha);
    c.poison.train_size = p.value("train", c.poison.train_size);
    c.poison.validation_size = p.value("validation", c.poison.validation_size);
    c.poison.seed = p.value("seed", c.poison.seed);
  }
  detail::rethrow_in("classifier", [&] {
    const auto cl = sec("classifier");
    c.classifier = detail::train_config_from_json(cl, c.classifier);
    if (cl.contains("arch")) {
      auto a = c.arch.to_json();
      a.update(cl.at("arch"));
      c.arch = ArchSpec::from_json(a);
    }
  });
  {
    const auto o = sec("oracle");
    c.oracle = detail::train_config_from_json(o, c.oracle);
    c.oracle_margin = o.value("margin", c.oracle_margin);
  }
  detail::rethrow_in("flow", [&] {
    auto f = c.flow.to_json();
    f.update(sec("flow"));
    c.flow = FlowConfig::from_json(f);
  });
  detail::rethrow_in("search", [&] {
    auto s = c.search.to_json();
    s.update(sec("search"));
    c.search = SearchConfig::from_json(s);
  });
  {
    const auto d = sec("distill");
    auto& dc = c.distill;
    dc.n_iterations = d.value("n_iterations", dc.n_iterations);
    dc.samples_per_iteration = d.value("samples_per_iteration", dc.samples_per_iteration);
    dc.feedback_samples = d.value("feedback_samples", dc.feedback_samples);
    if (d.contains("retrain"))
      dc.retrain = detail::train_config_from_json(d.at("retrain"), dc.retrain);
    dc.teacher = d.value("teacher", dc.teacher);
    dc.seed = d.value("seed", dc.seed);
    dc.accumulate_augmentations =
        d.value("accumulate_augmentations", dc.accumulate_augmentations);
    dc.threads = d.value("threads", dc.threads);
    dc.feedback_timeout_seconds =
        d.value("feedback_timeout_seconds", dc.feedback_timeout_seconds);
  }
  {
    const auto s = sec("sweep");
    c.sweep.kinds = s.value("kinds", c.sweep.kinds);
    c.sweep.alphas = s.value("alphas", c.sweep.alphas);
    c.sweep.seeds = s.value("seeds", c.sweep.seeds);
  }
  c.distill.search = c.search;
  c.validate();
  return c;
}

inline void PipelineConfig::validate() const {
  detail::rethrow_in("dataset", [&] { dataset.validate(); });
  if (arch.input.height != dataset.height || arch.input.width != dataset.width ||
      arch.input.channels != dataset.channels)
    throw ConfigError("classifier input must match the dataset image shape",
                      "classifier.arch.input");
  if (arch.num_classes != 2)
    throw ConfigError("only two classes are supported",
                      "classifier.arch.num_classes");
  poison.validate();
  detail::rethrow_in("classifier", [&] { classifier.validate(); });
  detail::rethrow_in("oracle", [&] { oracle.validate(); });
  detail::rethrow_in("flow", [&] { flow.validate(); });
  detail::rethrow_in("search", [&] { search.validate(); });
  detail::rethrow_in("distill", [&] { distill.validate(); });
  for (const auto& k : sweep.kinds) {
    try {
      confounder_kind_from_string(k);
    } catch (const ConfigError& e) {
      throw ConfigError(e.what(), "sweep.kinds");
    }
  }
  for (double a : sweep.alphas)
    if (!(a >= 0.5 && a <= 1.0))
      throw ConfigError("sweep alphas must lie in [0.5, 1]", "sweep.alphas");
}

inline PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string(), "--config");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what(), "--config");
  }
  return from_json(j);
}

// ---- cached artifacts ------------------------------------------------------

// Artifacts live under <root>/models/<kind>/ next to a .key.json holding the
// config that produced them; a mismatching key triggers a rebuild.
class Workspace {
 public:
  Workspace(std::filesystem::path root, PipelineConfig config)
      : root_(std::move(root)), cfg_(std::move(config)) {}

  const PipelineConfig& config() const { return cfg_; }
  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path model_dir() const {
    return root_ / "models" / to_string(cfg_.kind);
  }

  const LabeledDataset& full() {
    if (!full_)
      full_ = build_full_dataset(cfg_.dataset, cfg_.kind, cfg_.sizes, cfg_.dataset_seed);
    return *full_;
  }

  const LabeledDataset& poisoned() {
    if (!poisoned_) poisoned_ = build_poisoned_subset(full(), cfg_.poison);
    return *poisoned_;
  }

  std::filesystem::path oracle_path() const { return model_dir() / "oracle.ckpt"; }
  std::filesystem::path flow_path() const { return model_dir() / "flow.ckpt"; }
  std::filesystem::path classifier_path() const {
    char name[64];
    std::snprintf(name, sizeof name, "classifier_a%.3f_s%llu.ckpt", cfg_.poison.alpha,
                  static_cast<unsigned long long>(cfg_.poison.seed));
    return model_dir() / name;
  }

  const OracleTeacher& oracle() {
    if (oracle_) return *oracle_;
    const nlohmann::json key = {{"data", data_key()},
                                {"arch", cfg_.arch.to_json()},
                                {"train", detail::train_config_json(cfg_.oracle)}};
    OracleTeacher t;
    t.config.margin = cfg_.oracle_margin;
    t.oracle = cached<Classifier>(oracle_path(), key, [&] {
      return train_classifier(full(), Split::train, cfg_.oracle, cfg_.arch).classifier;
    });
    t.unpoisoned_test_accuracy = accuracy(t.oracle, full(), Split::test_unpoisoned);
    oracle_ = std::move(t);
    return *oracle_;
  }

  const InvertibleGenerator& flow() {
    if (flow_) return *flow_;
    const nlohmann::json key = {{"data", data_key()}, {"flow", cfg_.flow.to_json()}};
    flow_ = cached<InvertibleGenerator>(flow_path(), key, [&] {
      return train_generator(full(), Split::train, cfg_.flow).generator;
    });
    return *flow_;
  }

  const Classifier& classifier() {
    if (classifier_) return *classifier_;
    const nlohmann::json key = {
        {"data", data_key()},
        {"poison", cfg_.to_json().at("poison")},
        {"arch", cfg_.arch.to_json()},
        {"train", detail::train_config_json(cfg_.classifier)}};
    classifier_ = cached<Classifier>(classifier_path(), key, [&] {
      return train_classifier(poisoned(), Split::train, cfg_.classifier, cfg_.arch)
          .classifier;
    });
    return *classifier_;
  }

 private:
  nlohmann::json data_key() const { return cfg_.to_json().at("dataset"); }

  template <typename T, typename Build>
  T cached(const std::filesystem::path& path, const nlohmann::json& key,
           Build build) {
    namespace fs = std::filesystem;
    const fs::path key_path = fs::path(path).replace_extension(".key.json");
    if (fs::exists(path) && fs::exists(key_path)) {
      std::ifstream in(key_path);
      nlohmann::json stored;
      try {
        stored = nlohmann::json::parse(in);
      } catch (const nlohmann::json::exception&) {
      }
      if (stored == key) return T::load(path);
    }
    T value = build();
    fs::create_directories(path.parent_path());
    value.save(path);
    std::ofstream(key_path) << key.dump(2) << "\n";
    return value;
  }

  std::filesystem::path root_;
  PipelineConfig cfg_;
  std::optional<LabeledDataset> full_;
  std::optional<LabeledDataset> poisoned_;
  std::optional<OracleTeacher> oracle_;
  std::optional<InvertibleGenerator> flow_;
  std::optional<Classifier> classifier_;
};

inline std::filesystem::path data_root_from_env(
    const std::filesystem::path& fallback = "cfkd-data") {
  if (const char* d = std::getenv("CFKD_DATA_DIR"); d && *d) return d;
  return fallback;
}

// Runs distillation with the given teacher into <root>/runs/<run_id>.
inline DistillResult run_distillation(Workspace& ws, Teacher& teacher,
                                      const std::string& run_id,
                                      const RunObserver& observer = {}) {
  namespace fs = std::filesystem;
  const fs::path dir = ws.root() / "runs" / run_id;
  fs::create_directories(dir);
  std::ofstream(dir / "config.json") << ws.config().to_json().dump(2) << "\n";
  const auto& oracle = ws.oracle();
  oracle.oracle.save(dir / "oracle.ckpt");
  const InvertibleGenerator* g =
      ws.config().distill.search.mode == SearchMode::latent ? &ws.flow() : nullptr;
  const auto& f0 = ws.classifier();
  return run_cfkd(f0, g, ws.poisoned(), teacher, ws.config().distill, dir, observer);
}

inline std::vector<IterationReport> read_run_reports(
    const std::filesystem::path& run_dir, bool include_baseline) {
  std::vector<IterationReport> out;
  if (include_baseline) {
    std::ifstream b(run_dir / "baseline.json");
    if (!b) throw ConfigError("run has no baseline.json: " + run_dir.string(), "--run");
    out.push_back(IterationReport::from_json(nlohmann::json::parse(b)));
  }
  std::ifstream in(run_dir / "reports.json");
  if (!in) throw ConfigError("run has no reports.json: " + run_dir.string(), "--run");
  for (const auto& j : nlohmann::json::parse(in)) out.push_back(IterationReport::from_json(j));
  return out;
}

// Correlations over baseline + iteration checkpoints; also written to
// <run_dir>/correlations.json.
inline CorrelationReport evaluate_run(const std::filesystem::path& run_dir) {
  const auto reports = read_run_reports(run_dir, true);
  auto rep = correlation_report(reports, run_dir.filename().string());
  std::ofstream(run_dir / "correlations.json") << rep.to_json().dump(2) << "\n";
  return rep;
}

// ---- alpha sweep ----------------------------------------------------------

struct SweepRow {
  std::string kind;
  double alpha = 0.0;
  std::uint64_t seed = 0;
  double uncorrected_acc = 0.0;
  double corrected_acc = 0.0;
  double oracle_acc = 0.0;
  bool ok = false;
  std::string error;
  std::string run_id;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::vector<CorrelationReport> correlations;
};

inline std::string sweep_run_id(const std::string& kind, double alpha,
                                std::uint64_t seed) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "sweep-%s-a%03d-s%llu", kind.c_str(),
                static_cast<int>(std::lround(alpha * 100)),
                static_cast<unsigned long long>(seed));
  return buf;
}

inline void write_sweep_outputs(const std::filesystem::path& dir,
                                const SweepResult& result) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "sweep.csv");
    out << "kind,alpha,seed,uncorrected_acc,corrected_acc,oracle_acc,status\n";
    for (const auto& r : result.rows) {
      out << r.kind << ',' << format_metric(r.alpha) << ',' << r.seed << ',';
      if (r.ok)
        out << format_metric(r.uncorrected_acc) << ',' << format_metric(r.corrected_acc)
            << ',' << format_metric(r.oracle_acc) << ",ok\n";
      else
        out << ",,,failed\n";
    }
  }
  // Plot data: per kind, mean accuracies over seeds at each alpha.
  nlohmann::json series = nlohmann::json::array();
  std::vector<std::string> kinds;
  for (const auto& r : result.rows)
    if (std::find(kinds.begin(), kinds.end(), r.kind) == kinds.end()) kinds.push_back(r.kind);
  for (const auto& k : kinds) {
    std::vector<double> alphas;
    for (const auto& r : result.rows)
      if (r.kind == k && std::find(alphas.begin(), alphas.end(), r.alpha) == alphas.end())
        alphas.push_back(r.alpha);
    std::sort(alphas.begin(), alphas.end());
    nlohmann::json pts = nlohmann::json::array();
    for (double a : alphas) {
      double u = 0, c = 0;
      int n = 0;
      for (const auto& r : result.rows)
        if (r.kind == k && r.alpha == a && r.ok) {
          u += r.uncorrected_acc;
          c += r.corrected_acc;
          ++n;
        }
      pts.push_back({{"alpha", a},
                     {"seeds", n},
                     {"uncorrected_mean", n ? nlohmann::json(u / n) : nlohmann::json(nullptr)},
                     {"corrected_mean", n ? nlohmann::json(c / n) : nlohmann::json(nullptr)}});
    }
    series.push_back({{"kind", k}, {"points", pts}});
  }
  std::ofstream(dir / "sweep_plot.json")
      << nlohmann::json{{"x", "alpha"}, {"y", "unpoisoned_test_accuracy"}, {"series", series}}
             .dump(2)
      << "\n";
  nlohmann::json corr = nlohmann::json::array();
  for (const auto& c : result.correlations) corr.push_back(c.to_json());
  std::ofstream(dir / "correlations.json") << corr.dump(2) << "\n";
}

// Every (kind, alpha, seed) cell runs the full pipeline with the oracle
// teacher. A failing cell is recorded and the sweep moves on.
inline SweepResult sweep_alpha(const PipelineConfig& base,
                               const std::filesystem::path& root,
                               const std::function<void(const SweepRow&)>& on_row = {}) {
  SweepResult result;
  for (const auto& kind : base.sweep.kinds)
    for (double alpha : base.sweep.alphas)
      for (std::uint64_t seed : base.sweep.seeds) {
        SweepRow row;
        row.kind = kind;
        row.alpha = alpha;
        row.seed = seed;
        row.run_id = sweep_run_id(kind, alpha, seed);
        try {
          PipelineConfig cfg = base;
          cfg.kind = confounder_kind_from_string(kind);
          cfg.poison.alpha = alpha;
          cfg.apply_seed(seed);
          cfg.distill.teacher = "oracle";
          cfg.validate();
          Workspace ws(root, cfg);
          row.uncorrected_acc = accuracy(ws.classifier(), ws.poisoned(), Split::test_unpoisoned);
          OracleTeacherAdapter teacher(ws.oracle());
          row.oracle_acc = ws.oracle().unpoisoned_test_accuracy;
          const auto res = run_distillation(ws, teacher, row.run_id);
          row.corrected_acc = accuracy(res.selected, ws.poisoned(), Split::test_unpoisoned);
          row.ok = true;
          const auto run_dir = root / "runs" / row.run_id;
          if (res.reports.size() + 1 >= 3) result.correlations.push_back(evaluate_run(run_dir));
        } catch (const std::exception& e) {
          row.ok = false;
          row.error = e.what();
        }
        result.rows.push_back(row);
        if (on_row) on_row(row);
      }
  return result;
}

}  // namespace cfkd
