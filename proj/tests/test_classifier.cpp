#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "cfkd/classifier.hpp"
#include "cfkd/confounders.hpp"

using namespace cfkd;

namespace {

ArchSpec linear_arch(ImageShape s, int classes = 2) {
  ArchSpec a;
  a.kind = "linear";
  a.input = s;
  a.num_classes = classes;
  return a;
}

ImageTensor random_image(ImageShape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.05, 0.95);
  ImageTensor img(s);
  for (auto& v : img.values()) v = u(rng);
  return img;
}

// Points in [0,1]^2 labelled by the side of x0 + x1 = 1.
LabeledDataset diagonal_dataset(std::size_t n, std::uint64_t seed) {
  LabeledDataset d({1, 2, 1}, 2);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  while (d.size() < n) {
    const double a = u(rng), b = u(rng);
    if (std::abs(a + b - 1.0) < 0.1) continue;
    Sample s;
    s.image = ImageTensor({1, 2, 1}, {a, b});
    s.label = a + b > 1.0 ? 1 : 0;
    s.split = d.size() % 5 == 0 ? Split::validation : Split::train;
    d.add(std::move(s));
  }
  return d;
}

}  // namespace

TEST(Classifier, LinearInputGradientMatchesAnalyticSoftmax) {
  const ImageShape s{2, 3, 1};
  Classifier f(linear_arch(s, 3), 4);
  auto& p = f.mutable_parameters();
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : p) v = n(rng);
  const auto x = random_image(s, 6);
  const int target = 2;
  const auto r = f.log_prob_gradient(x, target);
  // d log p_t / dx = W_t - sum_c p_c W_c; logits = W (x - center) + b
  std::vector<double> logits(3);
  for (int c = 0; c < 3; ++c) {
    logits[c] = p[18 + c];
    for (int i = 0; i < 6; ++i) logits[c] += p[c * 6 + i] * (x.values()[i] - 0.5);
  }
  const double m = std::max({logits[0], logits[1], logits[2]});
  double z = 0;
  for (double l : logits) z += std::exp(l - m);
  for (int c = 0; c < 3; ++c) EXPECT_NEAR(r.probabilities[c], std::exp(logits[c] - m) / z, 1e-12);
  for (int i = 0; i < 6; ++i) {
    double expect = p[target * 6 + i];
    for (int c = 0; c < 3; ++c) expect -= r.probabilities[c] * p[c * 6 + i];
    EXPECT_NEAR(r.gradient[i], expect, 1e-12);
  }
}

TEST(Classifier, CnnInputGradientMatchesFiniteDifferences) {
  ArchSpec a;
  a.input = {8, 8, 3};
  Classifier f(a, 3);
  const auto x = random_image(a.input, 9);
  const auto g = input_gradient(f, x, 1);
  const double h = 1e-6;
  for (std::size_t i = 0; i < x.size(); i += 7) {
    ImageTensor xp = x, xm = x;
    xp.values()[i] += h;
    xm.values()[i] -= h;
    const double fd = (std::log(f.predict(xp)[1]) - std::log(f.predict(xm)[1])) / (2 * h);
    EXPECT_NEAR(g[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << i;
  }
}

TEST(Classifier, ZeroHeadPredictsUniform) {
  ArchSpec a;
  a.head_init = "zero";
  Classifier f(a, 0);
  const auto p = f.predict(random_image(a.input, 1));
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Classifier, ProbabilitiesSumToOne) {
  ArchSpec a;
  Classifier f(a, 2);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto p = f.predict(random_image(a.input, s));
    EXPECT_NEAR(p[0] + p[1], 1.0, 1e-12);
  }
}

TEST(Classifier, ShapeMismatchIsInputError) {
  Classifier f(ArchSpec{}, 0);
  EXPECT_THROW(f.predict(ImageTensor({8, 8, 3})), InputError);
  EXPECT_THROW(f.log_prob_gradient(random_image({16, 16, 3}, 0), 2), InputError);
}

TEST(Classifier, SaveLoadRoundTrip) {
  Classifier f(ArchSpec{}, 17);
  const auto path = std::filesystem::temp_directory_path() / "cfkd_test_clf.ckpt";
  f.save(path);
  const auto g = Classifier::load(path);
  EXPECT_EQ(f, g);
  const auto x = random_image(f.input_shape(), 3);
  EXPECT_EQ(f.predict(x), g.predict(x));
  std::filesystem::remove(path);
}

TEST(Training, SeparableToyReachesHighAccuracy) {
  const auto d = diagonal_dataset(500, 1);
  TrainConfig c;
  c.epochs = 30;
  c.learning_rate = 0.5;
  auto a = linear_arch({1, 2, 1});
  a.input_center = 0.0;
  const auto r = train_classifier(d, Split::train, c, a);
  EXPECT_GE(accuracy(r.classifier, d, Split::validation), 0.95);
}

TEST(Training, DeterministicForFixedSeed) {
  const auto d = diagonal_dataset(200, 2);
  TrainConfig c;
  c.epochs = 3;
  const auto a = linear_arch({1, 2, 1});
  EXPECT_EQ(train_classifier(d, Split::train, c, a).classifier,
            train_classifier(d, Split::train, c, a).classifier);
  TrainConfig c2 = c;
  c2.seed = 1;
  EXPECT_NE(train_classifier(d, Split::train, c, a).classifier.parameters(),
            train_classifier(d, Split::train, c2, a).classifier.parameters());
}

TEST(Training, ZeroEpochsReturnsInitialModel) {
  const auto d = diagonal_dataset(50, 3);
  const auto a = linear_arch({1, 2, 1});
  Classifier init(a, 9);
  TrainConfig c;
  c.epochs = 0;
  EXPECT_EQ(train_classifier(d, Split::train, c, a, &init).classifier, init);
}

TEST(Training, EmptySplitIsConfigError) {
  const auto d = diagonal_dataset(50, 3);
  EXPECT_THROW(train_classifier(d, Split::test_unpoisoned, TrainConfig{}, linear_arch({1, 2, 1})),
               ConfigError);
}

TEST(Training, SingleClassIsConfigError) {
  LabeledDataset d({1, 2, 1}, 2);
  for (int i = 0; i < 4; ++i) {
    Sample s;
    s.image = ImageTensor({1, 2, 1}, {0.1, 0.2});
    d.add(s);
  }
  EXPECT_THROW(train_classifier(d, Split::train, TrainConfig{}, linear_arch({1, 2, 1})),
               ConfigError);
}

TEST(Training, InvalidHyperparametersAreConfigErrors) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Training, FineTuneStartsFromInit) {
  const auto d = diagonal_dataset(100, 4);
  const auto a = linear_arch({1, 2, 1});
  TrainConfig c;
  c.epochs = 1;
  Classifier init(a, 123);
  const auto warm = train_classifier(d, Split::train, c, a, &init).classifier;
  c.fine_tune = false;
  const auto cold = train_classifier(d, Split::train, c, a, &init).classifier;
  EXPECT_NE(warm.parameters(), cold.parameters());
  EXPECT_EQ(cold, train_classifier(d, Split::train, c, a).classifier);
}
