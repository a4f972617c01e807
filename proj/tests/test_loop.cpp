#include <gtest/gtest.h>

#include <deque>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "cfkd/cfkd_loop.hpp"

using namespace cfkd;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  LabeledDataset data;
  Classifier initial;
};

const Fixture& fixture() {
  static const Fixture fx = [] {
    BaseSampleSpec b;
    b.height = b.width = 8;
    PoisonSpec p;
    p.train_size = 120;
    p.validation_size = 40;
    auto full = build_full_dataset(b, ConfounderKind::intensity_shift, {400, 200, 80}, 1);
    auto data = build_poisoned_subset(full, p);
    ArchSpec a;
    a.kind = "linear";
    a.input = b.shape();
    TrainConfig c;
    c.epochs = 5;
    auto init = train_classifier(data, Split::train, c, a).classifier;
    return Fixture{std::move(data), std::move(init)};
  }();
  return fx;
}

DistillConfig small_config(int n) {
  DistillConfig c;
  c.n_iterations = n;
  c.samples_per_iteration = 10;
  c.feedback_samples = 8;
  c.retrain.epochs = 1;
  c.search.mode = SearchMode::input_space;
  c.search.max_steps = 50;
  return c;
}

fs::path fresh_dir(const std::string& name) {
  const auto p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), {}};
}

FunctionTeacher accept_all() {
  return FunctionTeacher([](const CounterfactualRecord&) { return Judgment::true_counterfactual; });
}

IterationReport with_fb(std::optional<double> fb) {
  IterationReport r;
  r.feedback_accuracy = fb;
  return r;
}

}  // namespace

TEST(Select, ArgmaxWithLaterTieBreak) {
  std::vector<IterationReport> r{with_fb(0.2), with_fb(0.6), with_fb(0.5)};
  EXPECT_EQ(select_model(r)->index, 1u);
  r = {with_fb(0.5), with_fb(0.5)};
  EXPECT_EQ(select_model(r)->index, 1u);
  r = {with_fb(0.3)};
  EXPECT_EQ(select_model(r)->index, 0u);
  EXPECT_TRUE(select_model(r)->warning.empty());
}

TEST(Select, UndefinedAccuraciesFallBackToLastWithWarning) {
  std::vector<IterationReport> r{with_fb(std::nullopt), with_fb(std::nullopt)};
  const auto s = select_model(r);
  EXPECT_EQ(s->index, 1u);
  EXPECT_FALSE(s->warning.empty());
  r = {with_fb(0.9), with_fb(std::nullopt)};
  EXPECT_EQ(select_model(r)->index, 0u);
  EXPECT_FALSE(select_model({}).has_value());
}

TEST(Reports, CsvFormatting) {
  const auto dir = fresh_dir("cfkd_test_csv");
  fs::create_directories(dir);
  IterationReport a;
  a.iteration = 1;
  a.generated = 8;
  a.converged = 7;
  a.accepted = 3;
  a.feedback_accuracy = 3.0 / 7.0;
  a.poisoned_validation_accuracy = 1.0;
  a.unpoisoned_test_accuracy = 0.5;
  IterationReport b = a;
  b.iteration = 2;
  b.feedback_accuracy.reset();
  const std::vector<IterationReport> r{a, b};
  write_reports_csv(dir / "r.csv", r);
  EXPECT_EQ(slurp(dir / "r.csv"),
            "iteration,generated,converged,accepted,feedback_accuracy,val_accuracy,"
            "unpoisoned_test_accuracy\n"
            "1,8,7,3,0.428571,1.000000,0.500000\n"
            "2,8,7,3,,1.000000,0.500000\n");
  EXPECT_EQ(IterationReport::from_json(a.to_json()).to_json(), a.to_json());
  EXPECT_EQ(IterationReport::from_json(b.to_json()).to_json(), b.to_json());
  fs::remove_all(dir);
}

TEST(Loop, ZeroIterationsReturnsInput) {
  const auto& fx = fixture();
  auto t = accept_all();
  const auto r = run_cfkd(fx.initial, nullptr, fx.data, t, small_config(0));
  EXPECT_TRUE(r.reports.empty());
  EXPECT_EQ(r.selected, fx.initial);
  EXPECT_FALSE(r.selected_index.has_value());
  EXPECT_EQ(r.baseline.iteration, 0);
}

TEST(Loop, AcceptAllGivesUnitFeedbackAndPoolGrowth) {
  const auto& fx = fixture();
  auto t = accept_all();
  const auto cfg = small_config(3);
  const auto r = run_cfkd(fx.initial, nullptr, fx.data, t, cfg);
  ASSERT_EQ(r.reports.size(), 3u);
  std::size_t pool = fx.data.count(Split::train);
  EXPECT_EQ(r.baseline.training_pool_size, pool);
  for (std::size_t i = 0; i < r.reports.size(); ++i) {
    const auto& rep = r.reports[i];
    EXPECT_EQ(rep.iteration, static_cast<int>(i + 1));
    if (rep.converged > 0) EXPECT_EQ(*rep.feedback_accuracy, 1.0);
    EXPECT_EQ(rep.augmentation_accepted, rep.augmentation_converged);
    pool += rep.augmentation_converged;
    EXPECT_EQ(rep.training_pool_size, pool);
    EXPECT_EQ(rep.generated, 8u);
    EXPECT_EQ(rep.augmentation_generated, 10u);
  }
}

TEST(Loop, AugmentedLabelsFollowVerdicts) {
  const auto& fx = fixture();
  // accepts records whose source index is even; the rule is re-applied below
  auto rule = [](const CounterfactualRecord& r) {
    return r.sample_index % 2 == 0 ? Judgment::true_counterfactual
                                   : Judgment::false_counterfactual;
  };
  FunctionTeacher t(rule);
  const auto cfg = small_config(1);
  const auto dir = fresh_dir("cfkd_test_labels");
  run_cfkd(fx.initial, nullptr, fx.data, t, cfg, dir);

  const auto recs = read_records(dir / "rounds", "r00_augment", fx.data.shape());
  ASSERT_EQ(recs.size(), 10u);
  std::vector<ExampleRef> pool = examples_of(fx.data, Split::train);
  std::deque<ImageTensor> imgs;
  std::size_t flipped = 0, kept = 0;
  for (const auto& r : recs) {
    if (!r.converged()) continue;
    imgs.push_back(r.x_prime.clipped());
    const bool ok = rule(r) == Judgment::true_counterfactual;
    (ok ? flipped : kept)++;
    pool.push_back({&imgs.back(), ok ? r.y_target : r.y});
  }
  ASSERT_GT(flipped, 0u);
  ASSERT_GT(kept, 0u);
  TrainConfig rc = cfg.retrain;
  rc.seed = mix_seed(cfg.seed, 0xC0FFEE);
  const auto expect = train_on(pool, fx.initial.arch(), rc, &fx.initial).classifier;
  EXPECT_EQ(Classifier::load(dir / "checkpoints" / "iter_01.ckpt"), expect);

  for (const auto& v : VerdictLog::read(dir / "verdicts.jsonl")) {
    const auto it = std::find_if(recs.begin(), recs.end(),
                                 [&](const auto& r) { return r.record_id == v.record_id; });
    if (it != recs.end()) EXPECT_EQ(v.judgment, rule(*it));
  }
  fs::remove_all(dir);
}

TEST(Loop, FeedbackDrawsFromValidationAugmentationFromTrain) {
  const auto& fx = fixture();
  auto t = accept_all();
  const auto dir = fresh_dir("cfkd_test_splits");
  run_cfkd(fx.initial, nullptr, fx.data, t, small_config(1), dir);
  for (const auto& r : read_records(dir / "rounds", "r00_augment", fx.data.shape()))
    EXPECT_EQ(fx.data[r.sample_index].split, Split::train);
  for (const auto& r : read_records(dir / "rounds", "r01_feedback", fx.data.shape())) {
    EXPECT_EQ(fx.data[r.sample_index].split, Split::validation);
    EXPECT_EQ(r.record_id.substr(0, 5), "r01-f");
  }
  EXPECT_FALSE(fs::exists(dir / "rounds" / "r01_augment.jsonl"));
  fs::remove_all(dir);
}

TEST(Loop, ZeroConvergedMeansNullFeedbackAndNoRetrain) {
  const auto& fx = fixture();
  auto t = accept_all();
  auto cfg = small_config(2);
  cfg.search.max_steps = 0;
  cfg.search.target_confidence = 0.999;
  const auto dir = fresh_dir("cfkd_test_noconv");
  const auto r = run_cfkd(fx.initial, nullptr, fx.data, t, cfg, dir);
  ASSERT_EQ(r.reports.size(), 2u);
  for (const auto& rep : r.reports) {
    EXPECT_EQ(rep.converged, 0u);
    EXPECT_FALSE(rep.feedback_accuracy.has_value());
    EXPECT_FALSE(rep.retrained);
  }
  EXPECT_EQ(r.selected, fx.initial);
  EXPECT_EQ(*r.selected_index, 1u);
  EXPECT_NE(slurp(dir / "reports.csv").find("\n1,8,0,0,,"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Loop, RepeatedRunsAreIdentical) {
  const auto& fx = fixture();
  const OracleTeacher oracle{fx.initial, 0.0, {}};
  std::string csv[2];
  for (int i = 0; i < 2; ++i) {
    OracleTeacherAdapter t(oracle);
    const auto dir = fresh_dir("cfkd_test_det" + std::to_string(i));
    auto cfg = small_config(2);
    cfg.threads = i == 0 ? 1 : 3;
    run_cfkd(fx.initial, nullptr, fx.data, t, cfg, dir);
    csv[i] = slurp(dir / "reports.csv");
    fs::remove_all(dir);
  }
  EXPECT_FALSE(csv[0].empty());
  EXPECT_EQ(csv[0], csv[1]);
}

TEST(Loop, PersistsArtifactsAndFinalState) {
  const auto& fx = fixture();
  auto t = accept_all();
  const auto dir = fresh_dir("cfkd_test_artifacts");
  std::vector<RunState> states;
  RunObserver obs;
  obs.on_state = [&](RunState s) { states.push_back(s); };
  run_cfkd(fx.initial, nullptr, fx.data, t, small_config(1), dir, obs);
  for (const char* f : {"baseline.json", "reports.json", "reports.csv", "selection.json",
                        "verdicts.jsonl", "checkpoints/iter_00.ckpt", "checkpoints/iter_01.ckpt"})
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "state.json"))["state"], "done");
  const std::vector<RunState> expect{RunState::idle, RunState::generating,
                                     RunState::awaiting_feedback, RunState::retraining,
                                     RunState::generating, RunState::awaiting_feedback,
                                     RunState::done};
  EXPECT_EQ(states, expect);
  fs::remove_all(dir);
}

TEST(Loop, TeacherFailureAbortsAfterPersisting) {
  const auto& fx = fixture();
  int calls = 0;
  FunctionTeacher t([&](const CounterfactualRecord&) -> Judgment {
    if (calls++ > 20) throw TeacherSessionError("gone");
    return Judgment::true_counterfactual;
  });
  const auto dir = fresh_dir("cfkd_test_abort");
  EXPECT_THROW(run_cfkd(fx.initial, nullptr, fx.data, t, small_config(3), dir),
               TeacherSessionError);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "state.json"))["state"], "aborted");
  EXPECT_TRUE(fs::exists(dir / "baseline.json"));
  fs::remove_all(dir);
}

TEST(Loop, ConfigErrors) {
  const auto& fx = fixture();
  auto t = accept_all();
  auto cfg = small_config(1);
  cfg.search.mode = SearchMode::latent;
  EXPECT_THROW(run_cfkd(fx.initial, nullptr, fx.data, t, cfg), ConfigError);
  cfg = small_config(1);
  cfg.teacher = "robot";
  try {
    cfg.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "distill.teacher");
  }
  cfg = small_config(1);
  cfg.retrain.batch_size = 0;
  try {
    cfg.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field().rfind("distill.retrain.", 0), 0u) << e.field();
  }
}
