#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfkd/cfkd_loop.hpp"
#include "cfkd/error.hpp"

namespace cfkd {

// 1-based ranks, ties share the mean of the positions they occupy.
inline std::vector<double> midranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = rank;
    i = j + 1;
  }
  return r;
}

inline std::optional<double> pearson(std::span<const double> a,
                                     std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("series lengths differ");
  const std::size_t n = a.size();
  if (n < 2) return std::nullopt;
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

// Pearson correlation of the mid-ranks; nullopt when either series is
// constant or shorter than 2.
inline std::optional<double> spearman(std::span<const double> a,
                                      std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("series lengths differ");
  const auto ra = midranks(a);
  const auto rb = midranks(b);
  return pearson(ra, rb);
}

struct CorrelationReport {
  std::string run_id;
  std::size_t points = 0;
  std::optional<double> feedback_vs_test;
  std::optional<double> validation_vs_test;

  // Undefined correlations count as no association.
  bool feedback_beats_validation() const {
    if (!feedback_vs_test) return false;
    return *feedback_vs_test > validation_vs_test.value_or(0.0);
  }

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) {
      return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
    };
    return {{"run_id", run_id},
            {"points", points},
            {"spearman_feedback_vs_unpoisoned_test", opt(feedback_vs_test)},
            {"spearman_validation_vs_unpoisoned_test", opt(validation_vs_test)}};
  }
};

// One point per checkpoint. Checkpoints whose feedback accuracy is undefined
// drop out of the feedback series only.
inline CorrelationReport correlation_report(
    std::span<const IterationReport> reports, std::string run_id = {}) {
  if (reports.size() < 3)
    throw ConfigError("correlation needs at least 3 checkpoints, got " +
                      std::to_string(reports.size()));
  CorrelationReport out;
  out.run_id = std::move(run_id);
  out.points = reports.size();
  std::vector<double> fb, fb_test, val, test;
  for (const auto& r : reports) {
    val.push_back(r.poisoned_validation_accuracy);
    test.push_back(r.unpoisoned_test_accuracy);
    if (r.feedback_accuracy) {
      fb.push_back(*r.feedback_accuracy);
      fb_test.push_back(r.unpoisoned_test_accuracy);
    }
  }
  out.validation_vs_test = spearman(val, test);
  if (fb.size() >= 3) out.feedback_vs_test = spearman(fb, fb_test);
  return out;
}

}  // namespace cfkd
