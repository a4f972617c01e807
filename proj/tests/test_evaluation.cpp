#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "cfkd/evaluation.hpp"
#include "cfkd/pipeline.hpp"

using namespace cfkd;

namespace {

// Spearman from scratch: rank by counting (ties get the mean of their
// positions), then the textbook Pearson formula on the ranks.
std::optional<double> brute_spearman(const std::vector<double>& a,
                                     const std::vector<double>& b) {
  auto rank = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, equal = 0;
      for (double w : v) {
        less += w < v[i];
        equal += w == v[i];
      }
      r[i] = less + (equal + 1) / 2;
    }
    return r;
  };
  const auto ra = rank(a), rb = rank(b);
  const double n = static_cast<double>(a.size());
  double sa = 0, sb = 0, sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += ra[i];
    sb += rb[i];
    sab += ra[i] * rb[i];
    saa += ra[i] * ra[i];
    sbb += rb[i] * rb[i];
  }
  const double cov = sab - sa * sb / n;
  const double va = saa - sa * sa / n, vb = sbb - sb * sb / n;
  if (va <= 1e-12 || vb <= 1e-12) return std::nullopt;
  return cov / std::sqrt(va * vb);
}

IterationReport point(std::optional<double> fb, double val, double test) {
  IterationReport r;
  r.feedback_accuracy = fb;
  r.poisoned_validation_accuracy = val;
  r.unpoisoned_test_accuracy = test;
  return r;
}

std::string config_error_field(const nlohmann::json& j) {
  try {
    PipelineConfig::from_json(j);
  } catch (const ConfigError& e) {
    return e.field();
  }
  return "<no error>";
}

}  // namespace

TEST(Spearman, WorkedExamples) {
  const std::vector<double> a{1, 2, 3}, b{1, 3, 2}, c{3, 2, 1};
  EXPECT_DOUBLE_EQ(*spearman(a, b), 0.5);
  EXPECT_DOUBLE_EQ(*spearman(a, a), 1.0);
  EXPECT_DOUBLE_EQ(*spearman(a, c), -1.0);
  const std::vector<double> flat{0.7, 0.7, 0.7};
  EXPECT_FALSE(spearman(a, flat).has_value());
  EXPECT_FALSE(spearman(std::vector<double>{1.0}, std::vector<double>{2.0}).has_value());
  EXPECT_THROW(spearman(a, std::vector<double>{1.0}), InputError);
}

TEST(Spearman, MidranksForTies) {
  const std::vector<double> v{0.5, 0.1, 0.5, 0.9};
  EXPECT_EQ(midranks(v), (std::vector<double>{2.5, 1.0, 2.5, 4.0}));
}

TEST(Spearman, MatchesBruteForceOnRandomSeries) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> level(0, 5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 3 + trial % 8;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = level(rng) / 5.0;  // coarse levels force ties
      b[i] = level(rng) / 5.0;
    }
    const auto got = spearman(a, b);
    const auto want = brute_spearman(a, b);
    ASSERT_EQ(got.has_value(), want.has_value()) << trial;
    if (got) {
      EXPECT_NEAR(*got, *want, 1e-12) << trial;
      EXPECT_LE(std::abs(*got), 1.0);
    }
  }
}

TEST(Correlation, ReportSeries) {
  const std::vector<IterationReport> r{point(0.0, 1.0, 0.5), point(0.4, 1.0, 0.7),
                                       point(0.6, 0.9, 0.9), point(0.5, 1.0, 0.8)};
  const auto c = correlation_report(r, "run");
  EXPECT_EQ(c.points, 4u);
  EXPECT_DOUBLE_EQ(*c.feedback_vs_test, 1.0);
  const std::vector<double> val{1.0, 1.0, 0.9, 1.0}, test{0.5, 0.7, 0.9, 0.8};
  EXPECT_NEAR(*c.validation_vs_test, *brute_spearman(val, test), 1e-12);
  EXPECT_TRUE(c.feedback_beats_validation());
  const auto j = c.to_json();
  EXPECT_EQ(j.at("run_id"), "run");
  EXPECT_TRUE(j.at("spearman_feedback_vs_unpoisoned_test").is_number());
}

TEST(Correlation, NullHandling) {
  // constant validation accuracy: undefined, counts as no correlation
  std::vector<IterationReport> r{point(0.1, 1.0, 0.5), point(0.5, 1.0, 0.9),
                                 point(0.4, 1.0, 0.8)};
  auto c = correlation_report(r);
  EXPECT_FALSE(c.validation_vs_test.has_value());
  EXPECT_TRUE(c.feedback_beats_validation());
  EXPECT_TRUE(c.to_json().at("spearman_validation_vs_unpoisoned_test").is_null());

  // iterations without feedback drop out of the feedback series only
  r.push_back(point(std::nullopt, 0.5, 0.1));
  c = correlation_report(r);
  EXPECT_EQ(c.points, 4u);
  EXPECT_TRUE(c.validation_vs_test.has_value());
  EXPECT_DOUBLE_EQ(*c.feedback_vs_test, 1.0);

  r = {point(0.1, 1.0, 0.5), point(std::nullopt, 1.0, 0.9), point(0.4, 1.0, 0.8)};
  c = correlation_report(r);
  EXPECT_FALSE(c.feedback_vs_test.has_value());
  EXPECT_FALSE(c.feedback_beats_validation());
}

TEST(Correlation, TooFewPointsIsConfigError) {
  const std::vector<IterationReport> r{point(0.1, 1.0, 0.5), point(0.2, 1.0, 0.6)};
  EXPECT_THROW(correlation_report(r), ConfigError);
}

TEST(Config, DefaultsRoundTrip) {
  const PipelineConfig c;
  const auto back = PipelineConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(PipelineConfig::from_json(nlohmann::json::object()).to_json(), c.to_json());
}

TEST(Config, ErrorsCarryFieldPaths) {
  using nlohmann::json;
  EXPECT_EQ(config_error_field({{"dataset", {{"train", 402}}}}), "dataset.train");
  EXPECT_EQ(config_error_field({{"dataset", {{"kind", "glitter"}}}}), "dataset.kind");
  EXPECT_EQ(config_error_field({{"poison", {{"alpha", 1.5}}}}), "poison.alpha");
  EXPECT_EQ(config_error_field({{"poison", {{"alpha", "high"}}}}), "poison.alpha");
  EXPECT_EQ(config_error_field({{"search", {{"mode", "pixels"}}}}), "search.mode");
  EXPECT_EQ(config_error_field({{"search", {{"target_confidence", 1.2}}}}),
            "search.target_confidence");
  EXPECT_EQ(config_error_field({{"distill", {{"teacher", "robot"}}}}), "distill.teacher");
  EXPECT_EQ(config_error_field({{"distill", {{"retrain", {{"epochs", -1}}}}}}),
            "distill.retrain.epochs");
  EXPECT_EQ(config_error_field({{"classifier", {{"learning_rate", 0}}}}),
            "classifier.learning_rate");
  EXPECT_EQ(config_error_field({{"flow", {{"bogus", 1}}}}), "flow.bogus");
  EXPECT_EQ(config_error_field({{"sweep", {{"alphas", json::array({0.2})}}}}), "sweep.alphas");
  EXPECT_EQ(config_error_field({{"sweep", {{"kinds", json::array({"glitter"})}}}}), "sweep.kinds");
  EXPECT_EQ(config_error_field({{"extra", 1}}), "extra");
  EXPECT_EQ(config_error_field({{"distill", {{"n_iterations", 2.5}}}}), "distill.n_iterations");
}

TEST(Config, LoadRejectsBadJson) {
  const auto p = std::filesystem::temp_directory_path() / "cfkd_test_bad.json";
  std::ofstream(p) << "{ not json";
  try {
    PipelineConfig::load(p);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.field(), "--config");
  }
  std::filesystem::remove(p);
}

TEST(Config, SeedAppliesToPerRunParts) {
  PipelineConfig c;
  c.apply_seed(7);
  EXPECT_EQ(c.poison.seed, 7u);
  EXPECT_EQ(c.classifier.seed, 7u);
  EXPECT_EQ(c.distill.seed, 7u);
  EXPECT_EQ(c.dataset_seed, 1u);
}
