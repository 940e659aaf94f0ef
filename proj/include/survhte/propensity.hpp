#pragma once

// Propensity score ensemble: logistic regression, natural-spline logistic
// regression and a probability forest, blended with simplex weights chosen to
// minimize the worst inverse-probability-weighted standardized mean difference.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "survhte/common.hpp"
#include "survhte/regression_forest.hpp"

namespace survhte {

inline constexpr double kPropensityFloor = 0.01;
inline constexpr double kPropensityCeiling = 0.99;

inline double clamp_propensity(double e) {
  return std::clamp(e, kPropensityFloor, kPropensityCeiling);
}

namespace detail {

inline void check_treatment(const Eigen::MatrixXd& X, std::span<const int> A) {
  if (static_cast<std::size_t>(X.rows()) != A.size())
    throw std::invalid_argument("X and A have different lengths");
  std::size_t ones = 0;
  for (int a : A) {
    if (a != 0 && a != 1) throw std::invalid_argument("treatment must be 0/1");
    ones += static_cast<std::size_t>(a);
  }
  if (ones == 0 || ones == A.size()) throw std::invalid_argument("degenerate treatment");
}

}  // namespace detail

/// Logistic regression fitted by iteratively reweighted least squares.
/// Coefficients are reported on the original covariate scale; constant
/// columns get coefficient zero.
struct LogisticModel {
  double intercept = 0.0;
  Eigen::VectorXd coef;
  bool converged = false;
  bool ridge_fallback = false;
  int iterations = 0;

  double linear_predictor(const Eigen::MatrixXd& X, Eigen::Index i) const {
    return intercept + X.row(i).dot(coef);
  }

  std::vector<double> predict(const Eigen::MatrixXd& X) const {
    std::vector<double> p(static_cast<std::size_t>(X.rows()));
    for (Eigen::Index i = 0; i < X.rows(); ++i)
      p[static_cast<std::size_t>(i)] = logistic(linear_predictor(X, i));
    return p;
  }
};

namespace detail {

inline LogisticModel irls(const Eigen::MatrixXd& X, std::span<const int> A, double ridge) {
  const Eigen::Index n = X.rows(), p = X.cols();
  std::vector<Eigen::Index> keep;
  Eigen::VectorXd center = Eigen::VectorXd::Zero(p), scale = Eigen::VectorXd::Ones(p);
  for (Eigen::Index j = 0; j < p; ++j) {
    const double m = X.col(j).mean();
    const double sd = std::sqrt((X.col(j).array() - m).square().sum() / static_cast<double>(n));
    if (sd > 1e-12 * (1.0 + std::abs(m))) {
      keep.push_back(j);
      center(j) = m;
      scale(j) = sd;
    }
  }
  const auto q = static_cast<Eigen::Index>(keep.size()) + 1;
  Eigen::MatrixXd Z(n, q);
  Z.col(0).setOnes();
  for (Eigen::Index k = 1; k < q; ++k) {
    const Eigen::Index j = keep[static_cast<std::size_t>(k - 1)];
    Z.col(k) = (X.col(j).array() - center(j)) / scale(j);
  }
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y(i) = A[static_cast<std::size_t>(i)];

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(q);
  Eigen::VectorXd penalty = Eigen::VectorXd::Constant(q, ridge);
  penalty(0) = 0.0;
  LogisticModel model;
  for (int it = 0; it < 100; ++it) {
    const Eigen::VectorXd eta = Z * beta;
    Eigen::VectorXd w(n), z(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double pi = logistic(eta(i));
      w(i) = std::max(pi * (1.0 - pi), 1e-10);
      z(i) = eta(i) + (y(i) - pi) / w(i);
    }
    Eigen::MatrixXd H = Z.transpose() * w.asDiagonal() * Z;
    H.diagonal() += penalty;
    const Eigen::VectorXd rhs = Z.transpose() * (w.array() * z.array()).matrix();
    const Eigen::VectorXd next = H.ldlt().solve(rhs);
    model.iterations = it + 1;
    if (!next.allFinite()) break;
    const double change = (next - beta).cwiseAbs().maxCoeff();
    beta = next;
    if (change < 1e-8) {
      model.converged = true;
      break;
    }
  }
  model.coef = Eigen::VectorXd::Zero(p);
  model.intercept = beta(0);
  for (Eigen::Index k = 1; k < q; ++k) {
    const Eigen::Index j = keep[static_cast<std::size_t>(k - 1)];
    model.coef(j) = beta(k) / scale(j);
    model.intercept -= beta(k) * center(j) / scale(j);
  }
  if (!beta.allFinite()) model.converged = false;
  if (model.converged) {
    const double max_eta = (Z * beta).cwiseAbs().maxCoeff();
    if (max_eta > 30.0) model.converged = false;
  }
  return model;
}

}  // namespace detail

/// Maximum-likelihood logistic fit; falls back to a 1e-4 ridge penalty (and
/// flags it) when the data are separable.
inline LogisticModel fit_logistic_model(const Eigen::MatrixXd& X, std::span<const int> A) {
  detail::check_treatment(X, A);
  if (X.rows() < X.cols() + 1) throw std::invalid_argument("need n >= p + 1");
  LogisticModel m = detail::irls(X, A, 0.0);
  if (!m.converged) {
    m = detail::irls(X, A, 1e-4);
    m.ridge_fallback = true;
  }
  return m;
}

inline std::vector<double> fit_logistic(const Eigen::MatrixXd& X, std::span<const int> A) {
  return fit_logistic_model(X, A).predict(X);
}

/// Natural cubic spline expansion of the continuous columns (boundary knots
/// at the range, interior knots at the quintiles); binary columns pass through.
class SplineBasis {
 public:
  static SplineBasis fit(const Eigen::MatrixXd& X) {
    SplineBasis b;
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
      Column c;
      std::vector<double> v(X.col(j).data(), X.col(j).data() + X.rows());
      std::sort(v.begin(), v.end());
      const bool binary = std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0 || x == 1.0; });
      if (!binary && v.front() < v.back()) {
        c.lo = v.front();
        c.width = v.back() - v.front();
        std::vector<double> knots{0.0};
        for (double prob : {0.2, 0.4, 0.6, 0.8}) {
          const double k = (quantile_sorted(v, prob) - c.lo) / c.width;
          if (k > knots.back() + 1e-9 && k < 1.0 - 1e-9) knots.push_back(k);
        }
        knots.push_back(1.0);
        if (knots.size() >= 3) c.knots = std::move(knots);
        c.spline = true;
      }
      b.columns_.push_back(std::move(c));
    }
    return b;
  }

  Eigen::MatrixXd transform(const Eigen::MatrixXd& X) const {
    if (static_cast<std::size_t>(X.cols()) != columns_.size())
      throw std::invalid_argument("column count differs from the fitted basis");
    Eigen::Index width = 0;
    for (const auto& c : columns_) width += c.width_out();
    Eigen::MatrixXd out(X.rows(), width);
    Eigen::Index off = 0;
    for (std::size_t j = 0; j < columns_.size(); ++j) {
      const auto& c = columns_[j];
      for (Eigen::Index i = 0; i < X.rows(); ++i) {
        const double raw = X(i, static_cast<Eigen::Index>(j));
        if (!c.spline) {
          out(i, off) = raw;
          continue;
        }
        const double x = (raw - c.lo) / c.width;
        out(i, off) = x;
        const std::size_t K = c.knots.size();
        for (std::size_t k = 0; k + 2 < K; ++k)
          out(i, off + 1 + static_cast<Eigen::Index>(k)) = c.d(k, x) - c.d(K - 2, x);
      }
      off += c.width_out();
    }
    return out;
  }

 private:
  struct Column {
    bool spline = false;
    double lo = 0.0, width = 1.0;
    std::vector<double> knots;  // scaled to [0, 1], boundaries included

    Eigen::Index width_out() const {
      return spline && knots.size() >= 3 ? static_cast<Eigen::Index>(knots.size() - 1) : 1;
    }
    static double cube_pos(double v) { return v > 0.0 ? v * v * v : 0.0; }
    double d(std::size_t k, double x) const {
      const double last = knots.back();
      return (cube_pos(x - knots[k]) - cube_pos(x - last)) / (last - knots[k]);
    }
  };
  std::vector<Column> columns_;
};

struct SplineLogisticModel {
  SplineBasis basis;
  LogisticModel glm;

  std::vector<double> predict(const Eigen::MatrixXd& X) const { return glm.predict(basis.transform(X)); }
};

inline SplineLogisticModel fit_spline_logistic_model(const Eigen::MatrixXd& X, std::span<const int> A) {
  detail::check_treatment(X, A);
  SplineLogisticModel m{SplineBasis::fit(X), {}};
  m.glm = fit_logistic_model(m.basis.transform(X), A);
  return m;
}

inline std::vector<double> fit_spline_logistic(const Eigen::MatrixXd& X, std::span<const int> A) {
  return fit_spline_logistic_model(X, A).predict(X);
}

/// Out-of-bag P(A = 1 | x) from a probability forest (200 trees, half
/// subsamples without replacement, min node size 10, floor(sqrt(p)) features).
inline std::vector<double> fit_probability_forest(const Eigen::MatrixXd& X, std::span<const int> A,
                                                  std::uint64_t seed, std::size_t workers = 1) {
  detail::check_treatment(X, A);
  const auto n = static_cast<std::size_t>(X.rows());
  std::vector<double> y(A.begin(), A.end());
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  forest::ForestOptions opts;
  opts.num_trees = 200;
  opts.sample_fraction = 0.5;
  opts.tree.min_node_size = 10;
  opts.tree.mtry = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(X.cols()))));
  opts.workers = workers;
  const auto rf = forest::RegressionForest::fit(X, y, {}, all, opts, seed);
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = std::clamp(rf.predict_oob(X, i), 0.0, 1.0);
  return p;
}

/// ATE inverse-probability weights A/e + (1 - A)/(1 - e).
inline std::vector<double> ipw_weights(std::span<const int> A, std::span<const double> e) {
  std::vector<double> w(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) w[i] = A[i] == 1 ? 1.0 / e[i] : 1.0 / (1.0 - e[i]);
  return w;
}

/// Standardized mean difference of every column: difference of weighted group
/// means over sqrt of the average weighted group variance. Empty `w` means
/// unweighted.
inline std::vector<double> standardized_mean_differences(const Eigen::MatrixXd& X, std::span<const int> A,
                                                         std::span<const double> w) {
  std::vector<double> smd(static_cast<std::size_t>(X.cols()));
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    std::array<double, 2> sw{0, 0}, sx{0, 0}, sxx{0, 0};
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const auto a = static_cast<std::size_t>(A[static_cast<std::size_t>(i)]);
      const double wi = w.empty() ? 1.0 : w[static_cast<std::size_t>(i)];
      sw[a] += wi;
      sx[a] += wi * X(i, j);
    }
    const std::array<double, 2> mu{sx[0] / sw[0], sx[1] / sw[1]};
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const auto a = static_cast<std::size_t>(A[static_cast<std::size_t>(i)]);
      const double wi = w.empty() ? 1.0 : w[static_cast<std::size_t>(i)];
      sxx[a] += wi * (X(i, j) - mu[a]) * (X(i, j) - mu[a]);
    }
    const double pooled = std::sqrt(0.5 * (sxx[0] / sw[0] + sxx[1] / sw[1]));
    smd[static_cast<std::size_t>(j)] = pooled > 0.0 ? (mu[1] - mu[0]) / pooled : 0.0;
  }
  return smd;
}

inline double max_abs_smd(const Eigen::MatrixXd& X, std::span<const int> A, std::span<const double> e) {
  std::vector<double> clamped(e.begin(), e.end());
  for (auto& v : clamped) v = clamp_propensity(v);
  const auto smd = standardized_mean_differences(X, A, ipw_weights(A, clamped));
  double worst = 0.0;
  for (double s : smd) worst = std::max(worst, std::abs(s));
  return worst;
}

using LearnerProbs = std::array<std::vector<double>, 3>;

inline std::vector<double> blend(const LearnerProbs& probs, const std::array<double, 3>& w) {
  std::vector<double> e(probs[0].size());
  for (std::size_t i = 0; i < e.size(); ++i)
    e[i] = clamp_propensity(w[0] * probs[0][i] + w[1] * probs[1][i] + w[2] * probs[2][i]);
  return e;
}

/// Grid search over the 3-simplex (step 0.05) minimizing the maximum absolute
/// weighted SMD; near-ties go to the weight vector closest to uniform.
inline std::array<double, 3> solve_ensemble_weights(const LearnerProbs& probs, const Eigen::MatrixXd& X,
                                                    std::span<const int> A) {
  for (const auto& p : probs)
    if (p.size() != A.size()) throw std::invalid_argument("learner output has the wrong length");
  constexpr int steps = 20;
  constexpr double tie_tol = 1e-12;
  std::array<double, 3> best{1.0 / 3, 1.0 / 3, 1.0 / 3};
  double best_obj = std::numeric_limits<double>::infinity();
  double best_spread = std::numeric_limits<double>::infinity();
  for (int i = 0; i <= steps; ++i) {
    for (int j = 0; i + j <= steps; ++j) {
      const int k = steps - i - j;
      const std::array<double, 3> w{i / double(steps), j / double(steps), k / double(steps)};
      const double obj = max_abs_smd(X, A, blend(probs, w));
      double spread = 0.0;
      for (double v : w) spread += (v - 1.0 / 3) * (v - 1.0 / 3);
      const bool better = obj < best_obj - tie_tol;
      const bool tie = std::abs(obj - best_obj) <= tie_tol && spread < best_spread - 1e-15;
      if (better || tie) {
        best = w;
        best_obj = obj;
        best_spread = spread;
      }
    }
  }
  return best;
}

struct SmdRow {
  std::string covariate;
  double unweighted = 0.0;
  double weighted = 0.0;
};

struct PropensityFit {
  LearnerProbs learner_probs;  // logistic, spline logistic, forest
  std::array<double, 3> weights{};
  std::vector<double> ehat;
  std::vector<SmdRow> smd_report;
  bool ridge_fallback = false;
};

inline PropensityFit fit_propensity(const Eigen::MatrixXd& X, std::span<const int> A, std::uint64_t seed,
                                    std::size_t workers = 1) {
  PropensityFit fit;
  const auto glm = fit_logistic_model(X, A);
  const auto gam = fit_spline_logistic_model(X, A);
  fit.ridge_fallback = glm.ridge_fallback || gam.glm.ridge_fallback;
  fit.learner_probs[0] = glm.predict(X);
  fit.learner_probs[1] = gam.predict(X);
  fit.learner_probs[2] = fit_probability_forest(X, A, seed, workers);
  fit.weights = solve_ensemble_weights(fit.learner_probs, X, A);
  fit.ehat = blend(fit.learner_probs, fit.weights);
  const auto raw = standardized_mean_differences(X, A, {});
  const auto weighted = standardized_mean_differences(X, A, ipw_weights(A, fit.ehat));
  for (std::size_t j = 0; j < raw.size(); ++j)
    fit.smd_report.push_back({"x" + std::to_string(j + 1), raw[j], weighted[j]});
  return fit;
}

/// X with `ehat` appended as a final column.
inline Eigen::MatrixXd augment(const Eigen::MatrixXd& X, std::span<const double> ehat) {
  if (static_cast<std::size_t>(X.rows()) != ehat.size())
    throw std::invalid_argument("X and ehat have different lengths");
  Eigen::MatrixXd out(X.rows(), X.cols() + 1);
  out.leftCols(X.cols()) = X;
  for (Eigen::Index i = 0; i < X.rows(); ++i) out(i, X.cols()) = ehat[static_cast<std::size_t>(i)];
  return out;
}

inline void write_smd_report(const PropensityFit& fit, std::ostream& os) {
  os << "covariate,unweighted_smd,weighted_smd\n";
  for (const auto& r : fit.smd_report)
    os << r.covariate << ',' << format_double(r.unweighted) << ',' << format_double(r.weighted) << '\n';
}

}  // namespace survhte
