#pragma once

// The distillation loop. Round k (k = 0..n) explains the current model f_k on
// a validation batch (feedback accuracy) and, for k < n, on a training batch
// (augmentation); the teacher judges both in a single feedback session, then
// f_{k+1} is fine-tuned on the training pool plus the judged
// counterfactuals. Round 0 measures the uncorrected model (the baseline);
// rounds 1..n give the per-iteration reports.

#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfkd/classifier.hpp"
#include "cfkd/confounders.hpp"
#include "cfkd/counterfactual.hpp"
#include "cfkd/error.hpp"
#include "cfkd/flow.hpp"
#include "cfkd/labeled_dataset.hpp"
#include "cfkd/teachers.hpp"

namespace cfkd {

struct DistillConfig {
  int n_iterations = 5;
  int samples_per_iteration = 100;
  int feedback_samples = 100;  // validation records per round
  TrainConfig retrain{.epochs = 20};
  SearchConfig search;
  std::string teacher = "oracle";  // oracle | human | cluster
  std::uint64_t seed = 0;
  bool accumulate_augmentations = true;
  unsigned threads = 1;
  double feedback_timeout_seconds = 3600.0;

  void validate() const {
    if (n_iterations < 0)
      throw ConfigError("n_iterations must be >= 0", "distill.n_iterations");
    if (samples_per_iteration < 1)
      throw ConfigError("samples_per_iteration must be >= 1",
                        "distill.samples_per_iteration");
    if (feedback_samples < 1)
      throw ConfigError("feedback_samples must be >= 1",
                        "distill.feedback_samples");
    if (teacher != "oracle" && teacher != "human" && teacher != "cluster")
      throw ConfigError("teacher must be oracle, human or cluster",
                        "distill.teacher");
    try {
      retrain.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(e.what(), "distill.retrain." + e.field());
    }
    search.validate();
  }

  nlohmann::json to_json() const {
    return {{"n_iterations", n_iterations},
            {"samples_per_iteration", samples_per_iteration},
            {"feedback_samples", feedback_samples},
            {"retrain",
             {{"epochs", retrain.epochs},
              {"batch_size", retrain.batch_size},
              {"learning_rate", retrain.learning_rate},
              {"momentum", retrain.momentum},
              {"weight_decay", retrain.weight_decay},
              {"fine_tune", retrain.fine_tune}}},
            {"teacher", teacher},
            {"seed", seed},
            {"accumulate_augmentations", accumulate_augmentations},
            {"threads", threads},
            {"feedback_timeout_seconds", feedback_timeout_seconds}};
  }
};

enum class RunState { idle, generating, awaiting_feedback, retraining, done, aborted };

inline std::string to_string(RunState s) {
  switch (s) {
    case RunState::idle: return "idle";
    case RunState::generating: return "generating";
    case RunState::awaiting_feedback: return "awaiting_feedback";
    case RunState::retraining: return "retraining";
    case RunState::done: return "done";
    case RunState::aborted: return "aborted";
  }
  return "?";
}

struct IterationReport {
  int iteration = 0;
  // Feedback (validation) batch of this iteration's model.
  std::size_t generated = 0;
  std::size_t converged = 0;
  std::size_t failed = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::optional<double> feedback_accuracy;
  double poisoned_validation_accuracy = 0.0;
  double unpoisoned_test_accuracy = 0.0;
  std::string checkpoint;
  // Augmentation batch whose counterfactuals produced this model.
  std::size_t augmentation_generated = 0;
  std::size_t augmentation_converged = 0;
  std::size_t augmentation_accepted = 0;
  bool retrained = false;
  std::size_t training_pool_size = 0;

  nlohmann::json to_json() const {
    return {{"iteration", iteration},
            {"generated", generated},
            {"converged", converged},
            {"failed", failed},
            {"accepted", accepted},
            {"rejected", rejected},
            {"feedback_accuracy", feedback_accuracy
                                      ? nlohmann::json(*feedback_accuracy)
                                      : nlohmann::json(nullptr)},
            {"poisoned_validation_accuracy", poisoned_validation_accuracy},
            {"unpoisoned_test_accuracy", unpoisoned_test_accuracy},
            {"checkpoint", checkpoint},
            {"augmentation_generated", augmentation_generated},
            {"augmentation_converged", augmentation_converged},
            {"augmentation_accepted", augmentation_accepted},
            {"retrained", retrained},
            {"training_pool_size", training_pool_size}};
  }

  static IterationReport from_json(const nlohmann::json& j) {
    IterationReport r;
    r.iteration = j.at("iteration");
    r.generated = j.at("generated");
    r.converged = j.at("converged");
    r.failed = j.at("failed");
    r.accepted = j.at("accepted");
    r.rejected = j.at("rejected");
    if (!j.at("feedback_accuracy").is_null())
      r.feedback_accuracy = j.at("feedback_accuracy").get<double>();
    r.poisoned_validation_accuracy = j.at("poisoned_validation_accuracy");
    r.unpoisoned_test_accuracy = j.at("unpoisoned_test_accuracy");
    r.checkpoint = j.at("checkpoint");
    r.augmentation_generated = j.value("augmentation_generated", std::size_t{0});
    r.augmentation_converged = j.value("augmentation_converged", std::size_t{0});
    r.augmentation_accepted = j.value("augmentation_accepted", std::size_t{0});
    r.retrained = j.value("retrained", false);
    r.training_pool_size = j.value("training_pool_size", std::size_t{0});
    return r;
  }
};

inline std::string format_metric(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_reports_csv(const std::filesystem::path& path,
                              std::span<const IterationReport> reports) {
  std::ofstream out(path);
  out << "iteration,generated,converged,accepted,feedback_accuracy,"
         "val_accuracy,unpoisoned_test_accuracy\n";
  for (const auto& r : reports)
    out << r.iteration << ',' << r.generated << ',' << r.converged << ','
        << r.accepted << ','
        << (r.feedback_accuracy ? format_metric(*r.feedback_accuracy) : "")
        << ',' << format_metric(r.poisoned_validation_accuracy) << ','
        << format_metric(r.unpoisoned_test_accuracy) << '\n';
}

struct ModelSelection {
  std::size_t index = 0;  // into the report list
  std::string warning;
};

// Highest feedback accuracy wins, ties to the later iteration; without any
// defined value, the last report.
inline std::optional<ModelSelection> select_model(
    std::span<const IterationReport> reports) {
  if (reports.empty()) return std::nullopt;
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    if (!reports[i].feedback_accuracy) continue;
    if (!best || *reports[i].feedback_accuracy >= *reports[*best].feedback_accuracy)
      best = i;
  }
  if (best) return ModelSelection{*best, {}};
  return ModelSelection{reports.size() - 1,
                        "no iteration has a defined feedback accuracy; "
                        "falling back to the last checkpoint"};
}

struct RunObserver {
  std::function<void(RunState)> on_state;
  std::function<void(const IterationReport&)> on_report;
};

struct DistillResult {
  Classifier selected;
  std::optional<std::size_t> selected_index;  // into reports
  IterationReport baseline;
  std::vector<IterationReport> reports;
};

inline std::string record_id(int round, char batch, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "r%02d-%c-%04zu", round, batch, i);
  return buf;
}

// Run directory contents written here: state.json, checkpoints/iter_NN.ckpt,
// rounds/rNN_{augment,feedback}.*, verdicts.jsonl, baseline.json,
// reports.json, reports.csv, selection.json.
inline DistillResult run_cfkd(const Classifier& initial,
                              const InvertibleGenerator* generator,
                              const LabeledDataset& dataset, Teacher& teacher,
                              const DistillConfig& config,
                              const std::filesystem::path& run_dir = {},
                              const RunObserver& observer = {}) {
  namespace fs = std::filesystem;
  config.validate();
  const bool persist = !run_dir.empty();
  if (config.search.mode == SearchMode::latent && !generator)
    throw ConfigError("latent search needs a generator", "search.mode");
  if (generator && !(generator->shape() == initial.input_shape()))
    throw ConfigError("generator and classifier disagree on image shape");
  if (!(dataset.shape() == initial.input_shape()))
    throw ConfigError("dataset and classifier disagree on image shape");
  const auto train_idx = dataset.indices(Split::train);
  const auto val_idx = dataset.indices(Split::validation);
  if (train_idx.empty() || val_idx.empty())
    throw ConfigError("dataset needs train and validation splits", "dataset");

  VerdictLog log;
  if (persist) {
    fs::create_directories(run_dir / "checkpoints");
    fs::create_directories(run_dir / "rounds");
    log = VerdictLog(run_dir / "verdicts.jsonl", run_dir.filename().string());
  }
  auto set_state = [&](RunState s) {
    if (persist) {
      std::ofstream out(run_dir / "state.json.tmp");
      out << nlohmann::json{{"state", to_string(s)}}.dump() << "\n";
      out.close();
      fs::rename(run_dir / "state.json.tmp", run_dir / "state.json");
    }
    if (observer.on_state) observer.on_state(s);
  };

  DistillResult result;
  result.selected = initial;
  Classifier model = initial;
  std::vector<ExampleRef> base_pool = examples_of(dataset, Split::train);
  std::deque<ImageTensor> aug_images;  // stable addresses for ExampleRef
  std::vector<ExampleRef> aug_pool;
  std::vector<Classifier> models;  // one per report
  IterationReport pending_aug;  // augmentation fields for the next report
  const bool has_test = dataset.count(Split::test_unpoisoned) > 0;

  auto save_reports = [&] {
    if (!persist) return;
    std::ofstream(run_dir / "baseline.json") << result.baseline.to_json().dump(2) << "\n";
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : result.reports) arr.push_back(r.to_json());
    std::ofstream(run_dir / "reports.json") << arr.dump(2) << "\n";
    write_reports_csv(run_dir / "reports.csv", result.reports);
  };

  set_state(RunState::idle);
  try {
    for (int k = 0; k <= config.n_iterations; ++k) {
      set_state(RunState::generating);
      const bool augment = k < config.n_iterations;
      auto make_items = [&](const std::vector<std::size_t>& from, std::size_t n,
                            std::uint64_t salt, char tag) {
        std::vector<ExplainItem> items;
        const auto pick = sample_without_replacement(
            from, n, mix_seed(config.seed, 2 * static_cast<std::uint64_t>(k) + salt));
        for (std::size_t i = 0; i < pick.size(); ++i) {
          const auto& s = dataset[pick[i]];
          items.push_back({record_id(k, tag, i), pick[i], &s.image, s.label});
        }
        return items;
      };
      std::vector<CounterfactualRecord> aug_records;
      if (augment) {
        const auto items = make_items(train_idx, config.samples_per_iteration, 0, 'a');
        aug_records = batch_explain(model, generator, items, config.search,
                                    config.threads);
      }
      const auto fb_items = make_items(val_idx, config.feedback_samples, 1, 'f');
      const auto fb_records = batch_explain(model, generator, fb_items,
                                            config.search, config.threads);
      if (persist) {
        char name[16];
        std::snprintf(name, sizeof name, "r%02d", k);
        if (augment)
          write_records(run_dir / "rounds", std::string(name) + "_augment", aug_records);
        write_records(run_dir / "rounds", std::string(name) + "_feedback", fb_records);
      }

      set_state(RunState::awaiting_feedback);
      std::vector<CounterfactualRecord> all = aug_records;
      all.insert(all.end(), fb_records.begin(), fb_records.end());
      const auto verdicts = teacher.judge(all);
      std::map<std::string, Verdict> by_id;
      for (const auto& v : verdicts) {
        if (!by_id.emplace(v.record_id, v).second)
          throw InputError("teacher returned two verdicts for " + v.record_id);
      }
      std::size_t n_converged = 0;
      for (const auto& r : all)
        if (r.converged()) {
          ++n_converged;
          if (!by_id.count(r.record_id))
            throw InputError("teacher left " + r.record_id + " unjudged");
        }
      if (by_id.size() != n_converged)
        throw InputError("teacher judged records outside the batch");
      if (!teacher.persists_verdicts())
        for (const auto& v : verdicts) log.append(v);

      // Report for model k.
      IterationReport rep = pending_aug;
      rep.iteration = k;
      const auto fs_sum = summarize(fb_records);
      rep.generated = fs_sum.generated;
      rep.converged = fs_sum.converged;
      rep.failed = fs_sum.failed;
      std::vector<Verdict> fb_verdicts;
      for (const auto& r : fb_records)
        if (r.converged()) fb_verdicts.push_back(by_id.at(r.record_id));
      for (const auto& v : fb_verdicts) (v.accepted() ? rep.accepted : rep.rejected)++;
      rep.feedback_accuracy = feedback_accuracy(fb_verdicts);
      rep.poisoned_validation_accuracy = accuracy(model, dataset, Split::validation);
      rep.unpoisoned_test_accuracy =
          has_test ? accuracy(model, dataset, Split::test_unpoisoned) : 0.0;
      rep.training_pool_size = base_pool.size() + aug_pool.size();
      if (persist) {
        char name[32];
        std::snprintf(name, sizeof name, "checkpoints/iter_%02d.ckpt", k);
        model.save(run_dir / name);
        rep.checkpoint = name;
      }
      if (k == 0) {
        result.baseline = rep;
      } else {
        result.reports.push_back(rep);
        models.push_back(model);
        if (observer.on_report) observer.on_report(rep);
      }
      save_reports();
      if (!augment) break;

      set_state(RunState::retraining);
      pending_aug = IterationReport{};
      const auto as = summarize(aug_records);
      pending_aug.augmentation_generated = as.generated;
      pending_aug.augmentation_converged = as.converged;
      if (!config.accumulate_augmentations) {
        aug_pool.clear();
        aug_images.clear();
      }
      for (const auto& r : aug_records) {
        if (!r.converged()) continue;
        const bool ok = by_id.at(r.record_id).accepted();
        pending_aug.augmentation_accepted += ok ? 1 : 0;
        aug_images.push_back(r.x_prime.clipped());
        aug_pool.push_back({&aug_images.back(), ok ? r.y_target : r.y});
      }
      if (as.converged > 0) {
        std::vector<ExampleRef> pool = base_pool;
        pool.insert(pool.end(), aug_pool.begin(), aug_pool.end());
        TrainConfig rc = config.retrain;
        rc.seed = mix_seed(config.seed, 0xC0FFEE + static_cast<std::uint64_t>(k));
        model = train_on(pool, model.arch(), rc, &model).classifier;
        pending_aug.retrained = true;
      }
    }
  } catch (const TeacherSessionError&) {
    save_reports();
    set_state(RunState::aborted);
    throw;
  }

  const auto sel = select_model(result.reports);
  if (sel) {
    if (!sel->warning.empty()) std::cerr << "warning: " << sel->warning << "\n";
    result.selected_index = sel->index;
    result.selected = models[sel->index];
    if (persist)
      std::ofstream(run_dir / "selection.json")
          << nlohmann::json{{"iteration", result.reports[sel->index].iteration},
                            {"checkpoint", result.reports[sel->index].checkpoint},
                            {"warning", sel->warning}}
                 .dump(2)
          << "\n";
  }
  set_state(RunState::done);
  return result;
}

}  // namespace cfkd
