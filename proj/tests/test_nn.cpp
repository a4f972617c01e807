#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "cfkd/checkpoint.hpp"
#include "cfkd/image.hpp"
#include "cfkd/nn.hpp"

using namespace cfkd;
using namespace cfkd::nn;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

Network small_net() {
  return Network({2, 4, 4}, {std::make_shared<Conv2d>(2, 3, 3), std::make_shared<ReLU>(),
                             std::make_shared<AvgPool2>(),
                             std::make_shared<Linear>(12, 2)});
}

double weighted_out(const Network& n, std::span<const double> p, std::span<const double> x,
                    std::span<const double> w) {
  const auto y = n.forward(p, x);
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
  return s;
}

}  // namespace

TEST(Image, HwcChwRoundTrip) {
  ImageShape s{3, 5, 2};
  const auto v = random_vec(s.size(), 1);
  const auto chw = hwc_to_chw(v, s);
  // channel-major: value (y, x, c) lands at c*H*W + y*W + x
  EXPECT_EQ(chw[1 * 15 + 2 * 5 + 4], v[(2 * 5 + 4) * 2 + 1]);
  EXPECT_EQ(chw_to_hwc(chw, s), v);
}

TEST(Image, QuantizeRoundsHalfUpAndClamps) {
  EXPECT_EQ(quantize_channel(-0.2), 0);
  EXPECT_EQ(quantize_channel(1.7), 255);
  EXPECT_EQ(quantize_channel(0.5 / 255.0), 1);
  EXPECT_EQ(quantize_channel(0.49 / 255.0), 0);
  ImageTensor img({1, 1, 1}, {100.0 / 255.0});
  EXPECT_EQ(quantized(img), img);
}

TEST(Image, ValidateRejectsNonFinite) {
  ImageTensor img({1, 2, 1}, {0.1, std::nan("")});
  EXPECT_FALSE(img.all_finite());
}

TEST(Nn, ConvMatchesNaiveSamePadding) {
  Network net({1, 3, 3}, {std::make_shared<Conv2d>(1, 1, 3)});
  auto p = net.init_params(3);
  const auto x = random_vec(9, 4);
  const auto y = net.forward(p, x);
  // parameter layout: weights [out][in][ky][kx], then bias
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      double acc = p[9];
      for (int ky = -1; ky <= 1; ++ky)
        for (int kx = -1; kx <= 1; ++kx) {
          const int yy = r + ky, xx = c + kx;
          if (yy < 0 || yy >= 3 || xx < 0 || xx >= 3) continue;
          acc += p[(ky + 1) * 3 + (kx + 1)] * x[yy * 3 + xx];
        }
      EXPECT_NEAR(y[r * 3 + c], acc, 1e-12);
    }
}

TEST(Nn, BackwardMatchesFiniteDifferences) {
  const Network net = small_net();
  auto p = net.init_params(7);
  for (auto& v : p) v += 0.05;  // keep ReLUs away from their kink
  const auto x = random_vec(net.input_dims().size(), 8);
  const auto w = random_vec(2, 9);
  Network::Trace t;
  net.forward(p, x, t);
  std::vector<double> gp(p.size(), 0.0), gx(x.size());
  net.backward(p, t, w, gp, gx);
  const double h = 1e-6;
  for (std::size_t i = 0; i < p.size(); ++i) {
    auto pp = p, pm = p;
    pp[i] += h;
    pm[i] -= h;
    const double fd = (weighted_out(net, pp, x, w) - weighted_out(net, pm, x, w)) / (2 * h);
    EXPECT_NEAR(gp[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "param " << i;
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (weighted_out(net, p, xp, w) - weighted_out(net, p, xm, w)) / (2 * h);
    EXPECT_NEAR(gx[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << "input " << i;
  }
}

TEST(Nn, BackwardAccumulatesIntoParameterGradient) {
  const Network net = small_net();
  const auto p = net.init_params(1);
  const auto x = random_vec(net.input_dims().size(), 2);
  const std::vector<double> w{1.0, -1.0};
  Network::Trace t;
  net.forward(p, x, t);
  std::vector<double> once(p.size(), 0.0), twice(p.size(), 0.0);
  net.backward(p, t, w, once, {});
  net.backward(p, t, w, twice, {});
  net.backward(p, t, w, twice, {});
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(twice[i], 2 * once[i], 1e-12);
}

TEST(Nn, DescribeRoundTrip) {
  const Network net = small_net();
  const Network back = Network::from_json(net.describe());
  EXPECT_EQ(back.describe(), net.describe());
  const auto p = net.init_params(5);
  const auto x = random_vec(net.input_dims().size(), 6);
  EXPECT_EQ(back.forward(p, x), net.forward(p, x));
}

TEST(Nn, InitIsSeedDeterministic) {
  const Network net = small_net();
  EXPECT_EQ(net.init_params(11), net.init_params(11));
  EXPECT_NE(net.init_params(11), net.init_params(12));
}

TEST(Nn, ZeroInitLinearGivesZeroOutput) {
  Network net({4, 1, 1}, {std::make_shared<Linear>(4, 3, Linear::Init::zero)});
  const auto y = net.forward(net.init_params(0), random_vec(4, 1));
  for (double v : y) EXPECT_EQ(v, 0.0);
}

TEST(Nn, InputSizeMismatchThrows) {
  const Network net = small_net();
  EXPECT_THROW(net.forward(net.init_params(0), std::vector<double>(3)), InputError);
}

TEST(Optim, SgdMomentumMatchesHandRecurrence) {
  SgdMomentum opt(1, 0.1, 0.9, 0.0);
  std::vector<double> p{1.0};
  const std::vector<double> g{2.0};
  opt.step(p, g);  // v = 2, p = 1 - 0.2
  EXPECT_NEAR(p[0], 0.8, 1e-15);
  opt.step(p, g);  // v = 0.9*2 + 2 = 3.8, p = 0.8 - 0.38
  EXPECT_NEAR(p[0], 0.42, 1e-15);
}

TEST(Optim, AdamFirstStepMovesByLearningRate) {
  Adam opt(2, 0.01);
  std::vector<double> p{0.0, 0.0};
  opt.step(p, std::vector<double>{5.0, -0.001});
  EXPECT_NEAR(p[0], -0.01, 1e-6);
  EXPECT_NEAR(p[1], 0.01, 1e-4);
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto path = std::filesystem::temp_directory_path() / "cfkd_test_ckpt.bin";
  Checkpoint ck;
  ck.header = {{"kind", "test"}, {"n", 3}};
  ck.arrays.emplace_back("a", random_vec(17, 1));
  ck.arrays.emplace_back("b", std::vector<double>{});
  write_checkpoint(path, ck);
  const auto back = read_checkpoint(path);
  EXPECT_EQ(back.header["kind"], "test");
  EXPECT_EQ(back.header["n"], 3);
  EXPECT_EQ(back.array("a"), ck.array("a"));
  EXPECT_TRUE(back.array("b").empty());
  EXPECT_THROW(back.array("c"), ConfigError);
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsForeignFile) {
  const auto path = std::filesystem::temp_directory_path() / "cfkd_test_bad.bin";
  std::ofstream(path) << "not a checkpoint";
  EXPECT_THROW(read_checkpoint(path), ConfigError);
  std::filesystem::remove(path);
}
