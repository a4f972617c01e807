// Acceptance gate: one PASS/FAIL line per primary criterion.
//
//   acceptance <work-dir>
//
// Trained models are cached under <work-dir>/models; runs are redone every time.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cfkd/evaluation.hpp"
#include "cfkd/pipeline.hpp"

using namespace cfkd;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void verdict(int id, bool ok, const std::string& what, const std::string& detail) {
  std::printf("[%s] criterion %d: %s (%s)\n", ok ? "PASS" : "FAIL", id, what.c_str(),
              detail.c_str());
  std::fflush(stdout);
  failures += ok ? 0 : 1;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

PipelineConfig config_for(const std::string& kind, double alpha, std::uint64_t seed) {
  PipelineConfig c;
  c.kind = confounder_kind_from_string(kind);
  c.poison.alpha = alpha;
  c.apply_seed(seed);
  c.distill.search = c.search;
  c.validate();
  return c;
}

// log |det J| of a 2D toy flow by central differences.
double fd_log_det_2d(const InvertibleGenerator& g, const ImageTensor& x, double h) {
  double j[2][2];
  for (int c = 0; c < 2; ++c) {
    ImageTensor xp = x, xm = x;
    xp.values()[c] += h;
    xm.values()[c] -= h;
    const auto zp = g.encode(xp), zm = g.encode(xm);
    for (int r = 0; r < 2; ++r) j[r][c] = (zp[r] - zm[r]) / (2 * h);
  }
  return std::log(std::abs(j[0][0] * j[1][1] - j[0][1] * j[1][0]));
}

void criterion_1(const fs::path& work) {
  Workspace ws(work, config_for("intensity_shift", 1.0, 0));
  const auto& g = ws.flow();
  double worst = 0.0;
  std::size_t n = 0;
  for (Split sp : {Split::validation, Split::test_unpoisoned})
    for (std::size_t i : ws.full().indices(sp)) {
      if (n == 256) break;
      const auto& x = ws.full()[i].image;
      const auto back = g.decode(g.encode(x));
      for (std::size_t k = 0; k < x.size(); ++k)
        worst = std::max(worst, std::abs(back.values()[k] - x.values()[k]));
      ++n;
    }

  double worst_rel = 0.0;
  for (bool logit : {false, true}) {
    FlowConfig fc;
    fc.logit_preprocess = logit;
    fc.hidden_width = 8;
    InvertibleGenerator toy({1, 2, 1}, fc);
    toy.randomize(17, 0.3);
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    for (int t = 0; t < 20; ++t) {
      const ImageTensor x({1, 2, 1}, {u(rng), u(rng)});
      double analytic = 0.0;
      for (double v : toy.encode_trace(x).layer_logdets) analytic += v;
      const double fd = fd_log_det_2d(toy, x, 1e-6);
      worst_rel = std::max(worst_rel, std::abs(analytic - fd) / std::max(1.0, std::abs(fd)));
    }
  }
  verdict(1, n == 256 && worst < 1e-4 && worst_rel < 1e-3, "flow round-trip and log-det",
          "max |decode(encode(x)) - x| = " + fmt("%.3g", worst) + " over " +
              std::to_string(n) + " images; worst log-det relative error " +
              fmt("%.3g", worst_rel));
}

void criterion_2(const fs::path& work) {
  const auto cfg = config_for("intensity_shift", 1.0, 0);
  Workspace ws(work, cfg);
  const auto& f = ws.classifier();
  const auto& d = ws.poisoned();
  const auto pick = sample_without_replacement(d.indices(Split::validation), 100, 2024);
  std::vector<ExplainItem> items;
  for (std::size_t i = 0; i < pick.size(); ++i)
    items.push_back({"c2-" + std::to_string(i), pick[i], &d[pick[i]].image, d[pick[i]].label});
  const auto recs = batch_explain(f, &ws.flow(), items, cfg.search);
  std::size_t converged = 0, within_budget = 0, confident = 0;
  for (const auto& r : recs) {
    if (!r.converged()) continue;
    ++converged;
    within_budget += r.steps_taken <= 500;
    confident += f.predict(r.x_prime)[r.y_target] >= 0.8;
  }
  verdict(2, recs.size() == 100 && converged >= 90 && within_budget == converged &&
                 confident == converged,
          "counterfactual contract",
          std::to_string(converged) + "/100 converged within 500 steps; " +
              std::to_string(confident) + " re-checked at f(x')[y_target] >= 0.8");
}

void criterion_3(const fs::path& work) {
  bool ok = true;
  std::string detail;
  for (std::uint64_t seed : {0, 1, 2}) {
    Workspace hi(work, config_for("intensity_shift", 1.0, seed));
    const double v1 = accuracy(hi.classifier(), hi.poisoned(), Split::validation);
    const double t1 = accuracy(hi.classifier(), hi.poisoned(), Split::test_unpoisoned);
    Workspace lo(work, config_for("intensity_shift", 0.5, seed));
    const double v5 = accuracy(lo.classifier(), lo.poisoned(), Split::validation);
    const double t5 = accuracy(lo.classifier(), lo.poisoned(), Split::test_unpoisoned);
    ok = ok && v1 >= 0.95 && t1 <= 0.65 && std::abs(v5 - t5) <= 0.05;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%sseed %llu: a=1 val %.3f test %.3f, a=0.5 gap %.3f",
                  detail.empty() ? "" : "; ", static_cast<unsigned long long>(seed), v1, t1,
                  std::abs(v5 - t5));
    detail += buf;
  }
  verdict(3, ok, "shortcut reproduction", detail);
}

struct SweepOutcome {
  SweepResult result;
  fs::path root;
};

SweepOutcome run_sweep(const fs::path& work) {
  PipelineConfig base = config_for("intensity_shift", 1.0, 0);
  base.sweep.alphas = {0.6, 0.8, 1.0};
  base.sweep.seeds = {0, 1, 2};
  SweepOutcome out{sweep_alpha(base, work,
                               [](const SweepRow& r) {
                                 std::printf("  sweep %s a=%.1f s=%llu: %s\n", r.kind.c_str(),
                                             r.alpha, static_cast<unsigned long long>(r.seed),
                                             r.ok ? (fmt("uncorrected %.4f", r.uncorrected_acc) +
                                                     fmt(" corrected %.4f", r.corrected_acc))
                                                        .c_str()
                                                  : ("failed: " + r.error).c_str());
                                 std::fflush(stdout);
                               }),
                   work};
  write_sweep_outputs(work / "sweep", out.result);
  return out;
}

void criterion_4(const SweepOutcome& s) {
  bool ok = true;
  std::size_t cells = 0, improved = 0;
  std::string gains;
  for (const auto& r : s.result.rows) {
    ++cells;
    if (!r.ok) {
      ok = false;
      continue;
    }
    if (r.corrected_acc >= r.uncorrected_acc) ++improved;
    else ok = false;
    if (r.kind == "intensity_shift" && r.alpha == 1.0) {
      const double gain = r.corrected_acc - r.uncorrected_acc;
      ok = ok && gain >= 0.15;
      gains += (gains.empty() ? "" : ", ") + fmt("%+.1f pp", 100 * gain);
    }
  }
  ok = ok && cells == 27 && !gains.empty();
  verdict(4, ok, "distillation improvement",
          "intensity a=1 gains " + gains + "; corrected >= uncorrected in " +
              std::to_string(improved) + "/" + std::to_string(cells) + " cells");
}

void criterion_5(const SweepOutcome& s) {
  std::size_t evaluated = 0, beaten = 0, constant_test = 0;
  std::string fails;
  for (const auto& r : s.result.rows) {
    if (!r.ok) continue;
    const auto reports = read_run_reports(s.root / "runs" / r.run_id, true);
    std::vector<double> test;
    for (const auto& x : reports) test.push_back(x.unpoisoned_test_accuracy);
    if (std::all_of(test.begin(), test.end(), [&](double v) { return v == test[0]; })) {
      ++constant_test;  // no ordering to correlate with
      continue;
    }
    ++evaluated;
    const auto c = correlation_report(reports, r.run_id);
    if (c.feedback_beats_validation()) {
      ++beaten;
    } else {
      auto show = [](const std::optional<double>& v) {
        return v ? fmt("%.3f", *v) : std::string("null");
      };
      fails += " " + r.run_id + "(fb " + show(c.feedback_vs_test) + ", val " +
               show(c.validation_vs_test) + ")";
    }
  }
  verdict(5, evaluated > 0 && beaten == evaluated, "feedback accuracy tracks test accuracy",
          std::to_string(beaten) + "/" + std::to_string(evaluated) +
              " runs with varying test accuracy have Spearman(feedback) > Spearman(validation); " +
              std::to_string(constant_test) + " runs with constant test accuracy" +
              (fails.empty() ? "" : ";" + fails));
}

void criterion_6(const SweepOutcome& s) {
  std::size_t checked = 0, mismatched = 0, runs = 0;
  for (const auto& row : s.result.rows) {
    if (!row.ok) continue;
    const fs::path dir = s.root / "runs" / row.run_id;
    const Classifier oracle = Classifier::load(dir / "oracle.ckpt");
    std::map<std::string, Judgment> stored;
    for (const auto& v : VerdictLog::read(dir / "verdicts.jsonl")) stored[v.record_id] = v.judgment;
    std::size_t seen = 0;
    for (const auto& e : fs::directory_iterator(dir / "rounds")) {
      if (e.path().extension() != ".jsonl") continue;
      for (const auto& r :
           read_records(dir / "rounds", e.path().stem().string(), oracle.input_shape())) {
        const auto it = stored.find(r.record_id);
        if (!r.converged()) {
          mismatched += it != stored.end();
          continue;
        }
        ++seen;
        const auto p = oracle.predict(r.x_prime);
        std::size_t best = 0;
        for (std::size_t c = 1; c < p.size(); ++c)
          if (p[c] > p[best]) best = c;
        const auto expect = static_cast<int>(best) == r.y_target ? Judgment::true_counterfactual
                                                                 : Judgment::false_counterfactual;
        ++checked;
        if (it == stored.end() || it->second != expect) ++mismatched;
      }
    }
    mismatched += stored.size() != seen;
    ++runs;
  }
  verdict(6, runs > 0 && checked > 0 && mismatched == 0, "oracle verdicts recomputed",
          std::to_string(checked) + " verdicts over " + std::to_string(runs) + " runs, " +
              std::to_string(mismatched) + " mismatches");
}

void criterion_7() {
  const ImageShape shape{16, 16, 3};
  auto bytes = [](const std::string& name) {
    const auto s = slurp(fs::path(CFKD_GOLDEN_DIR) / name);
    return std::vector<unsigned char>(s.begin(), s.end());
  };
  const auto base = from_bytes(shape, bytes("base.bin"));
  int golden_ok = 0;
  for (auto k : {ConfounderKind::corner_tag, ConfounderKind::intensity_shift,
                 ConfounderKind::color_shift})
    for (int pct : {0, 50, 100}) {
      char name[64];
      std::snprintf(name, sizeof name, "%s_u%03d.bin", to_string(k).c_str(), pct);
      golden_ok += to_bytes(render_confounder(base, k, pct / 100.0)) == bytes(name);
    }

  PipelineConfig cfg;
  const auto full = build_full_dataset(cfg.dataset, cfg.kind, cfg.sizes, cfg.dataset_seed);
  bool cells_ok = true;
  for (auto [sp, n] : {std::pair{Split::train, cfg.sizes.train},
                       std::pair{Split::validation, cfg.sizes.validation},
                       std::pair{Split::test_unpoisoned, cfg.sizes.test}}) {
    const auto c = full.cell_counts(sp);
    for (auto& row : c)
      for (auto v : row) cells_ok = cells_ok && v == n / 4;
  }

  bool subset_ok = true;
  const std::vector<std::pair<double, CellCounts>> forced = {
      {1.0, {{{500, 0}, {0, 500}}}}, {0.5, {{{250, 250}, {250, 250}}}},
      {0.9, {{{450, 50}, {50, 450}}}}};
  for (const auto& [alpha, want] : forced) {
    PoisonSpec p;
    p.alpha = alpha;
    p.train_size = 1000;
    subset_ok = subset_ok && build_poisoned_subset(full, p).cell_counts(Split::train) == want;
  }
  verdict(7, golden_ok == 9 && cells_ok && subset_ok, "transform exactness",
          std::to_string(golden_ok) + "/9 golden images byte-equal; four-cell counts " +
              (cells_ok ? "exact" : "WRONG") + "; forced subset counts " +
              (subset_ok ? "exact" : "WRONG"));
}

void criterion_8(const SweepOutcome& s) {
  const auto cfg = config_for("intensity_shift", 1.0, 0);
  Workspace ws(s.root, cfg);
  OracleTeacherAdapter teacher(ws.oracle());
  run_distillation(ws, teacher, "determinism-replay");
  const auto a = slurp(s.root / "runs" / sweep_run_id("intensity_shift", 1.0, 0) / "reports.csv");
  const auto b = slurp(s.root / "runs" / "determinism-replay" / "reports.csv");
  verdict(8, !a.empty() && a == b, "determinism",
          a == b ? "replayed reports.csv is byte-identical"
                 : "replayed reports.csv differs");
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance-work");
  fs::create_directories(work);
  fs::remove_all(work / "runs");
  const auto t0 = std::chrono::steady_clock::now();
  auto step = [&](auto fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      std::printf("  error: %s\n", e.what());
      ++failures;
    }
    std::printf("  (%.0f s elapsed)\n", seconds_since(t0));
    std::fflush(stdout);
  };
  step([&] { criterion_7(); });
  step([&] { criterion_1(work); });
  step([&] { criterion_2(work); });
  step([&] { criterion_3(work); });
  SweepOutcome sweep;
  bool have_sweep = false;
  step([&] {
    sweep = run_sweep(work);
    have_sweep = true;
  });
  if (have_sweep) {
    step([&] { criterion_4(sweep); });
    step([&] { criterion_5(sweep); });
    step([&] { criterion_6(sweep); });
    step([&] { criterion_8(sweep); });
  } else {
    for (int id : {4, 5, 6, 8}) verdict(id, false, "needs the sweep", "sweep did not run");
  }
  std::printf("%s: %d criterion failure(s)\n", failures ? "FAILED" : "PASSED", failures);
  return failures ? 1 : 0;
}
