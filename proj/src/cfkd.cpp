// cfkd command-line entry point.
//
// Exit status: 0 success, 1 runtime failure, 2 usage error, 3 invalid config
// (the diagnostic names the offending field).

#include <chrono>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "cfkd/cfkd_loop.hpp"
#include "cfkd/classifier.hpp"
#include "cfkd/confounders.hpp"
#include "cfkd/counterfactual.hpp"
#include "cfkd/evaluation.hpp"
#include "cfkd/flow.hpp"
#include "cfkd/pipeline.hpp"
#include "cfkd/service.hpp"

namespace fs = std::filesystem;
using namespace cfkd;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string data_dir;
};

PipelineConfig load_config(const Globals& g) {
  PipelineConfig c = g.config_path.empty() ? PipelineConfig{}
                                           : PipelineConfig::load(g.config_path);
  if (g.seed) c.apply_seed(*g.seed);
  c.distill.search = c.search;
  c.validate();
  return c;
}

fs::path data_root(const Globals& g) {
  return g.data_dir.empty() ? data_root_from_env() : fs::path(g.data_dir);
}

std::string default_run_id(const PipelineConfig& c) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "distill-%s-a%03d-s%llu", to_string(c.kind).c_str(),
                static_cast<int>(std::lround(c.poison.alpha * 100)),
                static_cast<unsigned long long>(c.distill.seed));
  return buf;
}

void print(const nlohmann::json& j) { std::cout << j.dump(2) << std::endl; }

int cmd_make_dataset(const Globals& g, const std::string& out_opt) {
  const auto cfg = load_config(g);
  const fs::path out = out_opt.empty()
                           ? data_root(g) / "datasets" / to_string(cfg.kind)
                           : fs::path(out_opt);
  Workspace ws(data_root(g), cfg);
  const nlohmann::json meta = {{"kind", to_string(cfg.kind)},
                               {"dataset", cfg.to_json().at("dataset")}};
  LabeledDataset full = ws.full();
  LabeledDataset poisoned = ws.poisoned();
  write_manifest(out / "full" / "manifest.json", full, meta);
  auto pmeta = meta;
  pmeta["poison"] = cfg.to_json().at("poison");
  write_manifest(out / "poisoned" / "manifest.json", poisoned, pmeta);
  print({{"full", (out / "full" / "manifest.json").string()},
         {"poisoned", (out / "poisoned" / "manifest.json").string()},
         {"full_cells", cell_counts_json(ws.full())},
         {"poisoned_cells", cell_counts_json(ws.poisoned())}});
  return 0;
}

int cmd_train(const Globals& g, bool clean, const std::string& out) {
  const auto cfg = load_config(g);
  Workspace ws(data_root(g), cfg);
  if (clean) {
    const auto& o = ws.oracle();
    if (!out.empty()) o.oracle.save(out);
    print({{"checkpoint", out.empty() ? ws.oracle_path().string() : out},
           {"unpoisoned_test_accuracy", o.unpoisoned_test_accuracy}});
    return 0;
  }
  const auto& f = ws.classifier();
  if (!out.empty()) f.save(out);
  print({{"checkpoint", out.empty() ? ws.classifier_path().string() : out},
         {"poisoned_validation_accuracy", accuracy(f, ws.poisoned(), Split::validation)},
         {"unpoisoned_test_accuracy", accuracy(f, ws.poisoned(), Split::test_unpoisoned)}});
  return 0;
}

int cmd_train_flow(const Globals& g, const std::string& out) {
  const auto cfg = load_config(g);
  Workspace ws(data_root(g), cfg);
  const auto& gen = ws.flow();
  if (!out.empty()) gen.save(out);
  double rt = 0.0;
  const auto idx = ws.full().indices(Split::validation);
  for (std::size_t i = 0; i < std::min<std::size_t>(64, idx.size()); ++i) {
    const auto& x = ws.full()[idx[i]].image;
    const auto y = gen.decode(gen.encode(x));
    for (std::size_t k = 0; k < x.size(); ++k)
      rt = std::max(rt, std::abs(y.values()[k] - x.values()[k]));
  }
  print({{"checkpoint", out.empty() ? ws.flow_path().string() : out},
         {"mean_log_likelihood_validation", gen.mean_log_likelihood(ws.full(), Split::validation)},
         {"roundtrip_max_error", rt}});
  return 0;
}

int cmd_explain(const Globals& g, const std::string& model, const std::string& flow,
                int n, const std::string& split_name, const std::string& out_opt) {
  const auto cfg = load_config(g);
  Workspace ws(data_root(g), cfg);
  const Classifier f = model.empty() ? ws.classifier() : Classifier::load(model);
  std::optional<InvertibleGenerator> gen;
  if (cfg.search.mode == SearchMode::latent)
    gen = flow.empty() ? ws.flow() : InvertibleGenerator::load(flow);
  const Split split = split_from_string(split_name);
  const auto& d = ws.poisoned();
  const auto pick = sample_without_replacement(d.indices(split), static_cast<std::size_t>(n),
                                               mix_seed(cfg.distill.seed, 0xE1));
  std::vector<ExplainItem> items;
  for (std::size_t i = 0; i < pick.size(); ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "x-%04zu", i);
    items.push_back({id, pick[i], &d[pick[i]].image, d[pick[i]].label});
  }
  const auto records = batch_explain(f, gen ? &*gen : nullptr, items, cfg.search,
                                     cfg.distill.threads);
  const fs::path out = out_opt.empty() ? data_root(g) / "explanations" : fs::path(out_opt);
  write_records(out, "records", records);
  const auto s = summarize(records);
  print({{"records", (out / "records.jsonl").string()},
         {"generated", s.generated},
         {"converged", s.converged},
         {"failed", s.failed}});
  return 0;
}

// Serves one run and, unless it is finished, drives it on a worker thread.
int serve_run(const Globals& g, PipelineConfig cfg, const std::string& run_id,
              int port, bool exit_when_done) {
  const fs::path root = data_root(g);
  const fs::path dir = root / "runs" / run_id;
  fs::create_directories(dir);
  auto handle = std::make_shared<RunHandle>(run_id, dir);
  HttpService service;
  service.add(handle);
  if (handle->state() != RunState::done) launch_run(*handle, cfg, root);
  std::thread server([&] {
    if (!service.listen("0.0.0.0", port))
      std::cerr << "error: cannot listen on port " << port << "\n";
  });
  std::cerr << "serving run '" << run_id << "' on port " << port << std::endl;
  if (exit_when_done) {
    service.server().wait_until_ready();
    handle->join();
    service.stop();
  }
  server.join();
  handle->join();
  if (handle->state() == RunState::aborted) {
    std::cerr << "error: run aborted: " << handle->error() << "\n";
    return 1;
  }
  return 0;
}

int cmd_distill(const Globals& g, const std::string& teacher_opt, std::string run_id, int port) {
  auto cfg = load_config(g);
  if (!teacher_opt.empty()) cfg.distill.teacher = teacher_opt;
  cfg.validate();
  if (run_id.empty()) run_id = default_run_id(cfg);
  if (cfg.distill.teacher != "oracle") return serve_run(g, cfg, run_id, port, true);
  Workspace ws(data_root(g), cfg);
  OracleTeacherAdapter teacher(ws.oracle());
  const auto res = run_distillation(ws, teacher, run_id);
  const fs::path dir = ws.root() / "runs" / run_id;
  print({{"run_dir", dir.string()},
         {"reports", (dir / "reports.csv").string()},
         {"iterations", res.reports.size()},
         {"selected_iteration",
          res.selected_index ? nlohmann::json(res.reports[*res.selected_index].iteration)
                             : nlohmann::json(nullptr)},
         {"uncorrected_unpoisoned_test_accuracy", res.baseline.unpoisoned_test_accuracy},
         {"selected_unpoisoned_test_accuracy",
          accuracy(res.selected, ws.poisoned(), Split::test_unpoisoned)}});
  return 0;
}

int cmd_eval(const Globals& g, const std::string& run) {
  fs::path dir = run;
  if (!fs::exists(dir / "reports.json")) dir = data_root(g) / "runs" / run;
  if (!fs::exists(dir / "reports.json"))
    throw ConfigError("no finished run at '" + run + "'", "--run");
  const auto rep = evaluate_run(dir);
  auto j = rep.to_json();
  j["correlations"] = (dir / "correlations.json").string();
  print(j);
  return 0;
}

int cmd_sweep(const Globals& g, const std::string& out_opt) {
  const auto cfg = load_config(g);
  const fs::path root = data_root(g);
  const fs::path out = out_opt.empty() ? root / "sweep" : fs::path(out_opt);
  const auto result = sweep_alpha(cfg, root, [](const SweepRow& r) {
    std::cerr << r.kind << " alpha=" << r.alpha << " seed=" << r.seed << ": "
              << (r.ok ? "uncorrected=" + format_metric(r.uncorrected_acc) +
                             " corrected=" + format_metric(r.corrected_acc)
                       : "failed: " + r.error)
              << std::endl;
  });
  write_sweep_outputs(out, result);
  std::size_t failed = 0;
  for (const auto& r : result.rows) failed += r.ok ? 0 : 1;
  print({{"sweep", (out / "sweep.csv").string()},
         {"plot", (out / "sweep_plot.json").string()},
         {"cells", result.rows.size()},
         {"failed", failed}});
  return 0;
}

int cmd_serve(const Globals& g, const std::string& run_id, int port) {
  const fs::path dir = data_root(g) / "runs" / run_id;
  PipelineConfig cfg;
  if (!g.config_path.empty()) {
    cfg = load_config(g);
  } else if (fs::exists(dir / "config.json")) {
    cfg = PipelineConfig::from_json(nlohmann::json::parse(std::ifstream(dir / "config.json")));
  } else {
    throw ConfigError("run '" + run_id + "' has no config.json; pass --config", "--config");
  }
  return serve_run(g, cfg, run_id, port, false);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual knowledge distillation workbench"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  std::uint64_t seed_value = 0;
  app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed_value, "per-run seed override");
  app.add_option("--data-dir", g.data_dir, "artifact root (default $CFKD_DATA_DIR or ./cfkd-data)");

  std::string out, model, flow, split = "validation", teacher, run_id;
  bool clean = false;
  int n = 10, port = kDefaultPort;

  auto* mk = app.add_subcommand("make-dataset", "write full and poisoned dataset manifests");
  mk->add_option("--out", out, "output directory");
  auto* tr = app.add_subcommand("train", "train the classifier on the poisoned subset");
  tr->add_flag("--clean", clean, "train the oracle on the full pool instead");
  tr->add_option("--out", out, "extra copy of the checkpoint");
  auto* tf = app.add_subcommand("train-flow", "train the invertible generator");
  tf->add_option("--out", out, "extra copy of the checkpoint");
  auto* ex = app.add_subcommand("explain", "generate counterfactuals for a batch of samples");
  ex->add_option("--model", model, "classifier checkpoint (default: cached classifier)");
  ex->add_option("--flow", flow, "flow checkpoint (default: cached flow)");
  ex->add_option("-n,--count", n, "number of samples")->check(CLI::PositiveNumber);
  ex->add_option("--split", split, "train | validation | test_unpoisoned");
  ex->add_option("--out", out, "output directory");
  auto* di = app.add_subcommand("distill", "run the distillation loop");
  di->add_option("--teacher", teacher, "oracle | human | cluster")
      ->check(CLI::IsMember({"oracle", "human", "cluster"}));
  di->add_option("--run-id", run_id, "run directory name under <data>/runs");
  di->add_option("--port", port, "HTTP port for human and cluster teachers");
  auto* ev = app.add_subcommand("eval", "correlations for a finished run");
  ev->add_option("--run", run_id, "run id or run directory")->required();
  auto* sw = app.add_subcommand("sweep", "alpha sweep of uncorrected vs corrected accuracy");
  sw->add_option("--out", out, "output directory");
  auto* sv = app.add_subcommand("serve", "HTTP service for a run");
  sv->add_option("--run", run_id, "run id")->required();
  sv->add_option("--port", port, "listen port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  if (*seed_opt) g.seed = seed_value;

  try {
    if (*mk) return cmd_make_dataset(g, out);
    if (*tr) return cmd_train(g, clean, out);
    if (*tf) return cmd_train_flow(g, out);
    if (*ex) return cmd_explain(g, model, flow, n, split, out);
    if (*di) return cmd_distill(g, teacher, run_id, port);
    if (*ev) return cmd_eval(g, run_id);
    if (*sw) return cmd_sweep(g, out);
    if (*sv) return cmd_serve(g, run_id, port);
  } catch (const ConfigError& e) {
    std::cerr << "config error" << (e.field().empty() ? "" : " at " + e.field()) << ": "
              << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
