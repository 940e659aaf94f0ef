#pragma once

// Causal survival forest on the horizon-restricted log time: IPCW-AIPW
// pseudo-outcomes, honest regression trees grown in little bags, and
// per-individual intervals from between-bag variability.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <tuple>
#include <utility>
#include <vector>

#include "survhte/common.hpp"
#include "survhte/propensity.hpp"
#include "survhte/regression_forest.hpp"
#include "survhte/survival_forest.hpp"

namespace survhte {

struct CsfHyperparams {
  std::size_t num_trees = 2000;
  std::size_t min_node_size = 5;
  double subsample_fraction = 0.5;
  double honesty_fraction = 0.5;
  std::size_t mtry = 0;  // 0: ceil(sqrt(p) + 20) capped at p
  std::size_t bag_size = 50;
  double horizon_quantile = 0.95;
  std::size_t censor_trees = 500;
  std::size_t nuisance_trees = 200;
  std::size_t folds = 5;
  std::size_t workers = 1;

  static CsfHyperparams improved() {
    CsfHyperparams h;
    h.min_node_size = 2;
    return h;
  }

  void validate() const {
    if (min_node_size < 1) throw std::invalid_argument("min_node_size must be >= 1");
    if (!(subsample_fraction > 0.0 && subsample_fraction < 1.0) ||
        !(honesty_fraction > 0.0 && honesty_fraction < 1.0))
      throw std::invalid_argument("fractions must lie in (0, 1)");
    if (bag_size < 2) throw std::invalid_argument("bag_size must be >= 2");
    if (num_trees == 0 || num_trees % bag_size != 0)
      throw std::invalid_argument("num_trees must be a positive multiple of bag_size");
    if (!(horizon_quantile > 0.0 && horizon_quantile <= 1.0))
      throw std::invalid_argument("horizon_quantile must lie in (0, 1]");
    if (folds < 2) throw std::invalid_argument("folds must be >= 2");
  }

  std::size_t resolved_mtry(std::size_t p) const {
    return mtry == 0 ? forest::default_survival_mtry(p) : std::min(mtry, p);
  }
};

struct NuisanceSet {
  std::vector<double> ehat;
  std::vector<double> S_C;  // censoring survival at min(Y_i, h), left limit
  std::vector<double> m0;
  std::vector<double> m1;
  double horizon = 0.0;
};

struct CsfEstimate {
  std::vector<double> theta_hat;
  std::vector<double> se;
  std::vector<Interval> ci;
};

inline constexpr double kCsfVarianceFloor = 1e-8;

namespace csf {

inline double transformed_outcome(double y, double horizon) { return std::log(std::min(y, horizon)); }

inline bool complete_case(double y, int delta, double horizon) { return delta == 1 || y >= horizon; }

/// IPCW weights Delta_i / S_C_i.
inline std::vector<double> ipcw_weights(std::span<const double> Y, std::span<const int> delta,
                                        std::span<const double> S_C, double horizon) {
  std::vector<double> w(Y.size());
  for (std::size_t i = 0; i < Y.size(); ++i)
    w[i] = complete_case(Y[i], delta[i], horizon) ? 1.0 / S_C[i] : 0.0;
  return w;
}

/// Cross-fit arm-specific regressions of U on x over weighted complete cases.
inline std::pair<std::vector<double>, std::vector<double>> cross_fit_outcome_models(
    const Eigen::MatrixXd& X, std::span<const int> A, std::span<const double> U, std::span<const double> w,
    const CsfHyperparams& hyper, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(X.rows());
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = make_rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::size_t> fold(n);
  for (std::size_t k = 0; k < n; ++k) fold[perm[k]] = k % hyper.folds;

  forest::ForestOptions opts;
  opts.num_trees = hyper.nuisance_trees;
  opts.tree.mtry = hyper.resolved_mtry(static_cast<std::size_t>(X.cols()));
  opts.workers = hyper.workers;

  std::vector<double> m0(n), m1(n);
  for (std::size_t f = 0; f < hyper.folds; ++f) {
    for (int arm = 0; arm <= 1; ++arm) {
      std::vector<std::size_t> train;
      for (std::size_t i = 0; i < n; ++i)
        if (fold[i] != f && A[i] == arm && w[i] > 0.0) train.push_back(i);
      if (train.empty()) throw std::runtime_error("no complete cases in a treatment arm");
      const auto model =
          forest::RegressionForest::fit(X, U, w, train, opts, derive_seed(seed, 2 * f + static_cast<std::size_t>(arm) + 1));
      auto& out = arm == 0 ? m0 : m1;
      for (std::size_t i = 0; i < n; ++i)
        if (fold[i] == f) out[i] = model.predict(X, static_cast<Eigen::Index>(i));
    }
  }
  return {std::move(m0), std::move(m1)};
}

}  // namespace csf

/// Fits the censoring model, horizon, and cross-fit outcome regressions.
inline NuisanceSet fit_nuisances(const Eigen::MatrixXd& X_aug, std::span<const int> A, std::span<const double> Y,
                                 std::span<const int> delta, std::span<const double> ehat,
                                 const CsfHyperparams& hyper, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(X_aug.rows());
  if (A.size() != n || Y.size() != n || delta.size() != n || ehat.size() != n)
    throw std::invalid_argument("inconsistent input lengths");
  NuisanceSet nu;
  nu.ehat.assign(ehat.begin(), ehat.end());
  nu.horizon = quantile(std::vector<double>(Y.begin(), Y.end()), hyper.horizon_quantile);
  if (!(nu.horizon > 0.0)) throw std::invalid_argument("horizon must be positive");

  Eigen::MatrixXd XA(X_aug.rows(), X_aug.cols() + 1);
  XA.leftCols(X_aug.cols()) = X_aug;
  for (std::size_t i = 0; i < n; ++i) XA(static_cast<Eigen::Index>(i), X_aug.cols()) = A[i];
  forest::SurvivalForestOptions copts;
  copts.num_trees = hyper.censor_trees;
  copts.tree.mtry = forest::default_survival_mtry(static_cast<std::size_t>(XA.cols()));
  copts.workers = hyper.workers;
  const auto censoring = forest::CensoringModel::fit(XA, Y, delta, copts, derive_seed(seed, 1));
  nu.S_C.resize(n);
  for (std::size_t i = 0; i < n; ++i) nu.S_C[i] = censoring.evaluate_oob(XA, i, std::min(Y[i], nu.horizon));

  std::vector<double> U(n);
  for (std::size_t i = 0; i < n; ++i) U[i] = csf::transformed_outcome(Y[i], nu.horizon);
  const auto w = csf::ipcw_weights(Y, delta, nu.S_C, nu.horizon);
  std::tie(nu.m0, nu.m1) = csf::cross_fit_outcome_models(X_aug, A, U, w, hyper, derive_seed(seed, 2));
  return nu;
}

inline std::vector<double> compute_pseudo_outcomes(std::span<const int> A, std::span<const double> Y,
                                                   std::span<const int> delta, const NuisanceSet& nu) {
  const std::size_t n = Y.size();
  if (A.size() != n || delta.size() != n || nu.ehat.size() != n || nu.S_C.size() != n || nu.m0.size() != n ||
      nu.m1.size() != n)
    throw std::invalid_argument("inconsistent input lengths");
  std::vector<double> gamma(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double e = nu.ehat[i];
    if (!(e >= kPropensityFloor && e <= kPropensityCeiling)) throw std::domain_error("positivity violation");
    const double tau = nu.m1[i] - nu.m0[i];
    const bool complete = csf::complete_case(Y[i], delta[i], nu.horizon);
    if (!complete) {
      gamma[i] = tau;
      continue;
    }
    const double w = 1.0 / nu.S_C[i];
    const double resid = csf::transformed_outcome(Y[i], nu.horizon) - (A[i] ? nu.m1[i] : nu.m0[i]);
    gamma[i] = tau + (A[i] - e) / (e * (1.0 - e)) * w * resid;
  }
  return gamma;
}

/// Honest tree: structure from the first share of `subsample`, leaf values
/// from the rest.
struct HonestTree {
  forest::RegressionTree tree;
  std::vector<std::size_t> structure;
  std::vector<std::size_t> estimation;
};

inline HonestTree grow_honest_tree(const Eigen::MatrixXd& X, std::span<const double> gamma,
                                   std::vector<std::size_t> subsample, const CsfHyperparams& hyper, Rng& rng) {
  std::shuffle(subsample.begin(), subsample.end(), rng);
  const auto cut = static_cast<std::size_t>(
      std::ceil((1.0 - hyper.honesty_fraction) * static_cast<double>(subsample.size())));
  HonestTree h;
  h.structure.assign(subsample.begin(), subsample.begin() + static_cast<std::ptrdiff_t>(cut));
  h.estimation.assign(subsample.begin() + static_cast<std::ptrdiff_t>(cut), subsample.end());
  forest::TreeOptions opts;
  opts.min_node_size = hyper.min_node_size;
  opts.mtry = hyper.resolved_mtry(static_cast<std::size_t>(X.cols()));
  h.tree = forest::RegressionTree::grow(X, gamma, {}, h.structure, opts, rng);
  h.tree.repopulate(X, gamma, h.estimation, hyper.min_node_size);
  return h;
}

class CausalSurvivalForest {
 public:
  static CausalSurvivalForest grow(const Eigen::MatrixXd& X, std::span<const double> gamma,
                                   const CsfHyperparams& hyper, std::uint64_t seed) {
    hyper.validate();
    const auto n = static_cast<std::size_t>(X.rows());
    if (gamma.size() != n) throw std::invalid_argument("inconsistent input lengths");
    if (n < 4 * hyper.min_node_size) throw std::invalid_argument("too few observations for min_node_size");
    CausalSurvivalForest f;
    f.bag_size_ = hyper.bag_size;
    const std::size_t bags = hyper.num_trees / hyper.bag_size;
    const std::size_t half = n / 2;
    const std::size_t per_tree = std::min(
        half, std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(hyper.subsample_fraction * static_cast<double>(n)))));

    f.bag_members_.resize(bags);
    f.in_bag_.assign(bags, std::vector<char>(n, 0));
    for (std::size_t b = 0; b < bags; ++b) {
      Rng rng = make_rng(derive_seed(seed, b));
      std::vector<std::size_t> pool(n);
      std::iota(pool.begin(), pool.end(), 0);
      for (std::size_t k = 0; k < half; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, n - 1);
        std::swap(pool[k], pool[pick(rng)]);
      }
      pool.resize(half);
      for (std::size_t i : pool) f.in_bag_[b][i] = 1;
      f.bag_members_[b] = std::move(pool);
    }

    f.trees_.resize(hyper.num_trees);
    parallel_for(hyper.num_trees, hyper.workers, [&](std::size_t t) {
      const std::size_t b = t / hyper.bag_size;
      Rng rng = make_rng(derive_seed(derive_seed(seed, b), t % hyper.bag_size + 1));
      std::vector<std::size_t> sub = f.bag_members_[b];
      for (std::size_t k = 0; k < per_tree; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, sub.size() - 1);
        std::swap(sub[k], sub[pick(rng)]);
      }
      sub.resize(per_tree);
      f.trees_[t] = grow_honest_tree(X, gamma, std::move(sub), hyper, rng);
    });
    return f;
  }

  double predict(const Eigen::MatrixXd& X, Eigen::Index row) const {
    std::vector<double> v(trees_.size());
    for (std::size_t t = 0; t < trees_.size(); ++t) v[t] = trees_[t].tree.predict(X, row);
    return mean(v);
  }

  /// Estimates for rows of X treated as new points.
  CsfEstimate predict_with_ci(const Eigen::MatrixXd& X) const {
    CsfEstimate est;
    for (Eigen::Index r = 0; r < X.rows(); ++r) append(est, X, r, {});
    return est;
  }

  /// Estimates for the training rows, each using only bags that exclude it.
  CsfEstimate predict_oob_with_ci(const Eigen::MatrixXd& X) const {
    CsfEstimate est;
    for (Eigen::Index r = 0; r < X.rows(); ++r) append(est, X, r, static_cast<std::size_t>(r));
    return est;
  }

  const std::vector<HonestTree>& trees() const { return trees_; }
  std::size_t bag_size() const { return bag_size_; }
  std::size_t num_bags() const { return bag_members_.size(); }
  const std::vector<std::size_t>& bag_members(std::size_t b) const { return bag_members_[b]; }

 private:
  void append(CsfEstimate& est, const Eigen::MatrixXd& X, Eigen::Index row, std::optional<std::size_t> train_row) const {
    std::vector<std::size_t> use;
    for (std::size_t b = 0; b < bag_members_.size(); ++b)
      if (!train_row || !in_bag_[b][*train_row]) use.push_back(b);
    if (use.size() < 2) {
      use.resize(bag_members_.size());
      std::iota(use.begin(), use.end(), 0);
    }
    std::vector<double> bag_means(use.size()), within(use.size()), all;
    all.reserve(use.size() * bag_size_);
    std::vector<double> preds(bag_size_);
    for (std::size_t k = 0; k < use.size(); ++k) {
      for (std::size_t j = 0; j < bag_size_; ++j) preds[j] = trees_[use[k] * bag_size_ + j].tree.predict(X, row);
      bag_means[k] = mean(preds);
      within[k] = sample_variance(preds);
      all.insert(all.end(), preds.begin(), preds.end());
    }
    const double theta = mean(all);
    std::vector<double> dev(use.size());
    for (std::size_t k = 0; k < use.size(); ++k) dev[k] = (bag_means[k] - theta) * (bag_means[k] - theta);
    const double between = mean(dev);
    const double var = std::max(between - mean(within) / static_cast<double>(bag_size_), kCsfVarianceFloor);
    const double se = std::sqrt(var);
    est.theta_hat.push_back(theta);
    est.se.push_back(se);
    est.ci.push_back({theta - 1.96 * se, theta + 1.96 * se});
  }

  std::size_t bag_size_ = 0;
  std::vector<HonestTree> trees_;
  std::vector<std::vector<std::size_t>> bag_members_;
  std::vector<std::vector<char>> in_bag_;
};

/// Full pipeline on the training points. `X_aug` carries the propensity column.
inline CsfEstimate csf_estimate_ite(const Eigen::MatrixXd& X_aug, std::span<const int> A, std::span<const double> Y,
                                    std::span<const int> delta, std::span<const double> ehat,
                                    const CsfHyperparams& hyper, std::uint64_t seed) {
  hyper.validate();
  const auto nu = fit_nuisances(X_aug, A, Y, delta, ehat, hyper, derive_seed(seed, 1));
  const auto gamma = compute_pseudo_outcomes(A, Y, delta, nu);
  const auto forest = CausalSurvivalForest::grow(X_aug, gamma, hyper, derive_seed(seed, 2));
  return forest.predict_oob_with_ci(X_aug);
}

}  // namespace survhte
