#pragma once

// Exact t-SNE for the small point sets a cluster teacher looks at (a few
// hundred latent differences at most), O(n^2) per iteration.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <vector>

#include "cfkd/error.hpp"

namespace cfkd {

struct TsneConfig {
  double perplexity = 30.0;
  int iterations = 1000;
  double learning_rate = 200.0;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
  std::uint64_t seed = 0;
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

namespace detail {

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double e = a[i] - b[i];
    d += e * e;
  }
  return d;
}

// Conditional affinities p_{j|i} for one row, bisecting on the precision
// until the row entropy matches log(perplexity).
inline void row_affinities(std::span<const double> d2, std::size_t i,
                           double perplexity, std::span<double> row) {
  const double target = std::log(perplexity);
  double beta = 1.0, lo = 0.0, hi = std::numeric_limits<double>::infinity();
  double dmin = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < d2.size(); ++j)
    if (j != i) dmin = std::min(dmin, d2[j]);
  for (int it = 0; it < 200; ++it) {
    double sum = 0.0, wsum = 0.0;
    for (std::size_t j = 0; j < d2.size(); ++j) {
      row[j] = j == i ? 0.0 : std::exp(-beta * (d2[j] - dmin));
      sum += row[j];
      wsum += row[j] * (d2[j] - dmin);
    }
    const double h = std::log(sum) + beta * wsum / sum;
    for (double& r : row) r /= sum;
    if (std::abs(h - target) < 1e-5) break;
    if (h > target) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
    } else {
      hi = beta;
      beta = 0.5 * (beta + lo);
    }
  }
}

}  // namespace detail

// Embeds n points of equal dimension into 2D. Exactly coincident inputs get
// exactly coincident outputs. Perplexity is clamped to (n - 1) / 3 for small
// n. Deterministic for a fixed seed.
inline std::vector<Point2> tsne_embed(
    const std::vector<std::vector<double>>& points, const TsneConfig& cfg) {
  const std::size_t n_all = points.size();
  if (n_all == 0) return {};
  const std::size_t dim = points[0].size();
  for (const auto& p : points)
    if (p.size() != dim) throw InputError("t-SNE points differ in dimension");

  // Collapse duplicates.
  std::vector<std::size_t> owner(n_all);
  std::vector<std::size_t> uniq;
  for (std::size_t i = 0; i < n_all; ++i) {
    std::size_t k = 0;
    for (; k < uniq.size(); ++k)
      if (points[uniq[k]] == points[i]) break;
    if (k == uniq.size()) uniq.push_back(i);
    owner[i] = k;
  }
  const std::size_t n = uniq.size();
  std::vector<Point2> y(n);
  if (n >= 2) {
    std::vector<double> d2(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        d2[i * n + j] = detail::sq_dist(points[uniq[i]], points[uniq[j]]);
    const double perp = std::max(
        1.0, std::min(cfg.perplexity, (static_cast<double>(n) - 1.0) / 3.0));
    std::vector<double> P(n * n);
    for (std::size_t i = 0; i < n; ++i)
      detail::row_affinities({d2.data() + i * n, n}, i, perp,
                             {P.data() + i * n, n});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double s =
            std::max((P[i * n + j] + P[j * n + i]) / (2.0 * n), 1e-12);
        P[i * n + j] = P[j * n + i] = s;
      }

    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> nd(0.0, 1e-4);
    for (auto& p : y) p = {nd(rng), nd(rng)};
    std::vector<Point2> vel(n), gains(n, {1.0, 1.0}), grad(n);
    std::vector<double> num(n * n);
    for (int it = 0; it < cfg.iterations; ++it) {
      const double exag =
          it < cfg.exaggeration_iterations ? cfg.early_exaggeration : 1.0;
      const double mom = it < cfg.exaggeration_iterations ? 0.5 : 0.8;
      double zsum = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
          const double dx = y[i].x - y[j].x, dy = y[i].y - y[j].y;
          const double q = 1.0 / (1.0 + dx * dx + dy * dy);
          num[i * n + j] = num[j * n + i] = q;
          zsum += 2.0 * q;
        }
      for (std::size_t i = 0; i < n; ++i) {
        double gx = 0.0, gy = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          if (j == i) continue;
          const double q = num[i * n + j];
          const double m = (exag * P[i * n + j] - q / zsum) * q;
          gx += m * (y[i].x - y[j].x);
          gy += m * (y[i].y - y[j].y);
        }
        grad[i] = {4.0 * gx, 4.0 * gy};
      }
      auto update = [&](double g, double& v, double& gain, double& pos) {
        gain = (g > 0) == (v > 0) ? std::max(gain * 0.8, 0.01) : gain + 0.2;
        v = mom * v - cfg.learning_rate * gain * g;
        pos += v;
      };
      for (std::size_t i = 0; i < n; ++i) {
        update(grad[i].x, vel[i].x, gains[i].x, y[i].x);
        update(grad[i].y, vel[i].y, gains[i].y, y[i].y);
      }
      Point2 mean;
      for (const auto& p : y) {
        mean.x += p.x / n;
        mean.y += p.y / n;
      }
      for (auto& p : y) {
        p.x -= mean.x;
        p.y -= mean.y;
      }
    }
  }
  std::vector<Point2> out(n_all);
  for (std::size_t i = 0; i < n_all; ++i) out[i] = y[owner[i]];
  return out;
}

}  // namespace cfkd
