#pragma once

// Scoring of ITE estimates against the truth.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "survhte/bart.hpp"
#include "survhte/common.hpp"
#include "survhte/csf.hpp"

namespace survhte {

struct BiasRmse {
  double bias = 0.0;
  double rmse = 0.0;
};

namespace metrics_detail {

inline void check_pair(std::span<const double> a, std::span<const double> b) {
  if (a.empty()) throw std::invalid_argument("empty input");
  if (a.size() != b.size()) throw std::invalid_argument("length mismatch");
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) throw std::invalid_argument("non-finite input");
}

// -1, 0 or +1 from the counts of negative and positive draws: +1 when more
// than half are positive, -1 when more than half are negative.
inline int majority_sign(std::size_t negative, std::size_t positive, std::size_t total) {
  if (2 * positive > total) return 1;
  if (2 * negative > total) return -1;
  return 0;
}

inline double misclass_from(std::span<const double> truth, const auto& says_opposite) {
  std::size_t counted = 0, wrong = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == 0.0) continue;
    ++counted;
    wrong += says_opposite(i) ? 1 : 0;
  }
  if (counted == 0) throw std::invalid_argument("sign undefined");
  return static_cast<double>(wrong) / static_cast<double>(counted);
}

}  // namespace metrics_detail

inline BiasRmse bias_rmse(std::span<const double> theta_hat, std::span<const double> theta_true) {
  metrics_detail::check_pair(theta_hat, theta_true);
  std::vector<double> err(theta_hat.size()), sq(theta_hat.size());
  for (std::size_t i = 0; i < err.size(); ++i) {
    err[i] = theta_hat[i] - theta_true[i];
    sq[i] = err[i] * err[i];
  }
  return {mean(err), std::sqrt(mean(sq))};
}

/// Posterior sign misclassification: wrong when more than half of the draws
/// carry the opposite sign. Zero truths are excluded.
inline double misclass_bart(const BartPosterior& post, std::span<const double> theta_true) {
  if (post.S < 100) throw std::invalid_argument("need at least 100 posterior draws");
  if (theta_true.size() != post.n) throw std::invalid_argument("length mismatch");
  return metrics_detail::misclass_from(theta_true, [&](std::size_t i) {
    const auto d = post.draws_of(i);
    const auto neg = static_cast<std::size_t>(std::count_if(d.begin(), d.end(), [](double v) { return v < 0.0; }));
    const auto pos = static_cast<std::size_t>(std::count_if(d.begin(), d.end(), [](double v) { return v > 0.0; }));
    return metrics_detail::majority_sign(neg, pos, d.size()) == (theta_true[i] > 0.0 ? -1 : 1);
  });
}

inline double misclass_csf(std::span<const double> theta_hat, std::span<const double> theta_true) {
  metrics_detail::check_pair(theta_hat, theta_true);
  return metrics_detail::misclass_from(theta_true, [&](std::size_t i) {
    return theta_true[i] > 0.0 ? theta_hat[i] < 0.0 : theta_hat[i] > 0.0;
  });
}

/// Group index (0-based) of each individual for the calibration statistic:
/// up to `groups` rank groups of theta_hat, tied values kept together in the
/// lowest group they reach.
inline std::vector<std::size_t> calibration_groups(std::span<const double> theta_hat, std::size_t groups = 10) {
  const std::size_t n = theta_hat.size();
  std::vector<double> sorted(theta_hat.begin(), theta_hat.end());
  std::sort(sorted.begin(), sorted.end());
  const auto distinct = static_cast<std::size_t>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
  const std::size_t G = std::min(groups, distinct);
  if (G < 2) throw std::invalid_argument("need at least 2 distinct predictions");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return theta_hat[a] < theta_hat[b]; });
  std::vector<std::size_t> group(n);
  for (std::size_t r = 0; r < n; ++r) {
    std::size_t g = r * G / n;
    if (r > 0 && theta_hat[order[r]] == theta_hat[order[r - 1]]) g = group[order[r - 1]];
    group[order[r]] = g;
  }
  return group;
}

inline constexpr double kCalibrationVarianceFloor = 1e-6;

/// Decile calibration statistic: sum_g n_g (mean gap_g)^2 / var_g with
/// gap = theta_hat - theta_true.
inline double hosmer_lemeshow(std::span<const double> theta_hat, std::span<const double> theta_true) {
  metrics_detail::check_pair(theta_hat, theta_true);
  if (theta_hat.size() < 50) throw std::invalid_argument("need n >= 50");
  const auto group = calibration_groups(theta_hat);
  const std::size_t G = *std::max_element(group.begin(), group.end()) + 1;
  std::vector<std::vector<double>> gaps(G);
  for (std::size_t i = 0; i < group.size(); ++i) gaps[group[i]].push_back(theta_hat[i] - theta_true[i]);
  double hl = 0.0;
  for (auto& g : gaps) {
    if (g.empty()) continue;
    std::sort(g.begin(), g.end());  // order-free summation within a group
    const double m = mean(g);
    const double v = g.size() > 1 ? std::max(sample_variance(g), kCalibrationVarianceFloor) : kCalibrationVarianceFloor;
    hl += static_cast<double>(g.size()) * m * m / v;
  }
  return hl;
}

inline double coverage(std::span<const Interval> intervals, std::span<const double> theta_true) {
  if (intervals.empty()) throw std::invalid_argument("empty input");
  if (intervals.size() != theta_true.size()) throw std::invalid_argument("length mismatch");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < intervals.size(); ++i) {
    if (intervals[i].lo > intervals[i].hi) throw std::invalid_argument("interval with lo > hi");
    hit += intervals[i].lo <= theta_true[i] && theta_true[i] <= intervals[i].hi;
  }
  return static_cast<double>(hit) / static_cast<double>(intervals.size());
}

/// Per-individual flags: the forest-mean estimate lies outside the interval.
inline std::vector<char> csf_flags(const CsfEstimate& est) {
  const double bar = mean(est.theta_hat);
  std::vector<char> flags(est.ci.size());
  for (std::size_t i = 0; i < flags.size(); ++i) flags[i] = bar < est.ci[i].lo || bar > est.ci[i].hi;
  return flags;
}

inline double null_flags_csf(const CsfEstimate& est) {
  if (est.ci.empty()) return 0.0;
  const auto flags = csf_flags(est);
  return static_cast<double>(std::count(flags.begin(), flags.end(), 1)) / static_cast<double>(flags.size());
}

struct ReplicationResult {
  std::string family;
  int dgp_index = 0;
  std::string estimator;
  std::string hyper_variant;
  std::size_t rep_index = 0;
  std::uint64_t seed = 0;
  std::size_t n = 0;
  double bias = 0.0;
  double rmse = 0.0;
  double misclass = 0.0;
  double hl = 0.0;
  double coverage = 0.0;
  double null_flag_prop = 0.0;
  double censor_rate = 0.0;
};

}  // namespace survhte
