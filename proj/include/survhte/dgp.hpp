#pragma once

// Simulation designs with known individualized treatment effects on the
// log-time scale: the Henderson (AFT surrogate), Cui (threshold/Cox/Poisson)
// and Hu (Weibull proportional hazards) families, plus null-HTE variants.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numbers>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "survhte/common.hpp"
#include "survhte/null_constants.hpp"

namespace survhte {

enum class Family { Henderson, Cui, Hu };
enum class ResidualLaw { Gaussian, Gumbel, StdGamma, TMixture };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::Henderson: return "henderson";
    case Family::Cui: return "cui";
    case Family::Hu: return "hu";
  }
  return "unknown";
}

inline Family parse_family(const std::string& s) {
  if (s == "henderson") return Family::Henderson;
  if (s == "cui") return Family::Cui;
  if (s == "hu") return Family::Hu;
  throw std::invalid_argument("unknown family '" + s + "'");
}

inline std::string to_string(ResidualLaw law) {
  switch (law) {
    case ResidualLaw::Gaussian: return "gaussian";
    case ResidualLaw::Gumbel: return "gumbel";
    case ResidualLaw::StdGamma: return "stdgamma";
    case ResidualLaw::TMixture: return "tmixture";
  }
  return "unknown";
}

/// Henderson DGP1..4 differ only in the residual law, in this order.
inline ResidualLaw henderson_law(int dgp_index) {
  switch (dgp_index) {
    case 1: return ResidualLaw::Gaussian;
    case 2: return ResidualLaw::Gumbel;
    case 3: return ResidualLaw::StdGamma;
    case 4: return ResidualLaw::TMixture;
  }
  throw std::invalid_argument("dgp_index must be in 1..4");
}

struct DgpSpec {
  Family family = Family::Hu;
  int dgp_index = 1;
  std::size_t n = 1000;
  std::uint64_t seed = 0;
  bool null_hte = false;
  std::optional<ResidualLaw> residual_law;

  static DgpSpec make(Family family, int dgp_index, std::size_t n, std::uint64_t seed,
                      bool null_hte = false) {
    DgpSpec s{family, dgp_index, n, seed, null_hte, std::nullopt};
    if (family == Family::Henderson) s.residual_law = henderson_law(dgp_index);
    s.validate();
    return s;
  }

  void validate() const {
    if (dgp_index < 1 || dgp_index > 4) throw std::invalid_argument("dgp_index must be in 1..4");
    if (n < 1) throw std::invalid_argument("n must be positive");
    if (residual_law.has_value() != (family == Family::Henderson))
      throw std::invalid_argument("residual_law is required for, and only for, the Henderson family");
    if (family == Family::Henderson && *residual_law != henderson_law(dgp_index))
      throw std::invalid_argument("Henderson residual_law does not match dgp_index");
  }

  std::string label() const {
    return to_string(family) + (null_hte ? "_null" : "") + "/dgp" + std::to_string(dgp_index);
  }
};

inline std::size_t num_covariates(Family family) {
  return family == Family::Cui ? 15 : 10;
}

/// Administrative end of follow-up; infinite where the design has none.
inline double admin_cap(const DgpSpec& spec) {
  if (spec.family != Family::Cui) return std::numeric_limits<double>::infinity();
  constexpr std::array<double, 4> caps{1.5, 2.0, 15.0, 3.0};
  return caps[static_cast<std::size_t>(spec.dgp_index - 1)];
}

struct SurvivalDataset {
  Eigen::MatrixXd X;
  std::vector<int> A;
  std::vector<double> Y;
  std::vector<int> delta;
  std::vector<double> theta_true;
  std::vector<double> e_true;
  std::vector<double> T_latent;

  std::size_t size() const { return Y.size(); }

  double censor_rate() const {
    if (delta.empty()) return 0.0;
    std::size_t censored = 0;
    for (int d : delta) censored += (d == 0);
    return static_cast<double>(censored) / static_cast<double>(delta.size());
  }
};

namespace detail {

constexpr double kHendersonIntercept = 0.85;
constexpr std::uint64_t kHendersonDesignSeed = 0x5eed'2020'0a57ULL;
constexpr double kHuShape = 2.0;
constexpr double kHuScaleControl = 1200.0;
constexpr double kHuScaleTreated = 2000.0;

// Stream tags; each dataset component gets its own independent stream.
enum StreamTag : std::uint64_t { kCovariates = 1, kTreatment = 2, kEventTimes = 3, kCensoring = 4 };

inline double beta24_pdf(double x) {
  if (x < 0.0 || x > 1.0) return 0.0;
  const double u = 1.0 - x;
  return 20.0 * x * u * u * u;
}

inline const Eigen::MatrixXd& cui_cholesky() {
  static const Eigen::MatrixXd L = [] {
    Eigen::MatrixXd V(15, 15);
    for (int i = 0; i < 15; ++i)
      for (int j = 0; j < 15; ++j) V(i, j) = std::pow(0.5, std::abs(i - j));
    Eigen::MatrixXd lower = V.llt().matrixL();
    return lower;
  }();
  return L;
}

inline double henderson_m0(std::span<const double> x) {
  return kHendersonIntercept + 0.3 * x[0] - 0.2 * x[1] + 0.3 * x[0] * x[5];
}

inline double henderson_effect(std::span<const double> x) {
  return 0.25 - 0.2 * x[0] + 0.3 * x[6];
}

inline double hu_f(int dgp, int a, std::span<const double> x) {
  const double x1 = x[0], x2 = x[1], x3 = x[2], x4 = x[3], x5 = x[4], x6 = x[5], x7 = x[6];
  if (a == 1) {
    if (dgp <= 2)
      return -0.2 + 0.1 * logistic(x1) - 0.8 * std::sin(x3) - 0.1 * x5 * x5 - 0.3 * x6 - 0.2 * x7;
    const double common =
        0.5 - 0.1 * logistic(x2) + 0.1 * std::sin(x3) - 0.1 * x4 * x4 + 0.2 * x4 - 0.1 * x5 * x5;
    if (dgp == 3) return common + 0.2 * logistic(x5) + 0.2 * x6 - 0.3 * x7;
    return common - 0.3 * x6;
  }
  switch (dgp) {
    case 1: return 0.2 - 0.5 * x1 - 0.8 * x3 - 1.8 * x5 - 0.9 * x6 - 0.1 * x7;
    case 2:
    case 3:
      return -0.1 + 0.1 * x1 * x1 - 0.2 * std::sin(x3) + 0.2 * logistic(x5) + 0.2 * x6 - 0.3 * x7;
    default:
      return -0.2 + 0.5 * std::sin(std::numbers::pi * x1 * x3) + 0.2 * logistic(x5) + 0.2 * x6 -
             0.3 * x7;
  }
}

inline double cui_poisson_mean(int dgp, int a, std::span<const double> x) {
  const double x1 = x[0], x2 = x[1], x3 = x[2];
  if (dgp == 3) return x2 * x2 + x3 + 6.0 + 2.0 * (std::sqrt(x1) - 0.3) * a;
  return x2 + x3 + std::max(0.0, x1 - 0.3) * a;
}

/// Draw from Poisson(mu) conditioned on the value being at least 1, by
/// inverting the conditional CDF with a single uniform.
inline double zero_truncated_poisson(double mu, Rng& rng) {
  if (!(mu > 0.0) || !std::isfinite(mu)) throw std::domain_error("Poisson mean must be positive");
  const double p0 = std::exp(-mu);
  const double u = p0 + uniform_open(rng) * (-std::expm1(-mu));
  double pmf = p0 * mu;  // P(K = 1)
  double cdf = p0 + pmf;
  double k = 1.0;
  while (cdf < u && pmf > 0.0) {
    k += 1.0;
    pmf *= mu / k;
    cdf += pmf;
  }
  return k;
}

/// E[log K | K >= 1] for K ~ Poisson(mu), by direct series summation.
inline double zero_truncated_poisson_mean_log(double mu) {
  if (!(mu > 0.0)) throw std::domain_error("Poisson mean must be positive");
  const double norm = -std::expm1(-mu);
  const double kmax = mu + 12.0 * std::sqrt(mu) + 40.0;
  double total = 0.0;
  for (double k = 2.0; k <= kmax; k += 1.0) {
    const double log_pmf = -mu + k * std::log(mu) - std::lgamma(k + 1.0);
    total += std::log(k) * std::exp(log_pmf);
  }
  return total / norm;
}

inline double draw_residual(ResidualLaw law, Rng& rng) {
  switch (law) {
    case ResidualLaw::Gaussian: {
      std::normal_distribution<double> d(0.0, 1.0);
      return d(rng);
    }
    case ResidualLaw::Gumbel: {
      std::extreme_value_distribution<double> d(-std::numbers::egamma, 1.0);
      return d(rng);
    }
    case ResidualLaw::StdGamma: {
      std::gamma_distribution<double> d(2.0, 1.0);
      return d(rng) - 2.0;
    }
    case ResidualLaw::TMixture: {
      std::uniform_int_distribution<int> comp(0, 2);
      std::student_t_distribution<double> t3(3.0);
      const double loc = 2.0 * (comp(rng) - 1);
      return loc + t3(rng);
    }
  }
  throw std::logic_error("unknown residual law");
}

inline void check_dim(const DgpSpec& spec, std::span<const double> x) {
  if (x.size() != num_covariates(spec.family))
    throw std::invalid_argument("covariate row has " + std::to_string(x.size()) +
                                " entries, expected " +
                                std::to_string(num_covariates(spec.family)));
}

inline std::vector<double> row(const Eigen::MatrixXd& X, Eigen::Index i) {
  std::vector<double> r(static_cast<std::size_t>(X.cols()));
  for (Eigen::Index j = 0; j < X.cols(); ++j) r[static_cast<std::size_t>(j)] = X(i, j);
  return r;
}

/// One counterfactual event time T(a) at covariates x under the non-null design.
inline double draw_time_original(const DgpSpec& spec, std::span<const double> x, int a, Rng& rng) {
  switch (spec.family) {
    case Family::Henderson: {
      const double m = henderson_m0(x) + (a == 1 ? henderson_effect(x) : 0.0);
      return std::exp(m + draw_residual(*spec.residual_law, rng));
    }
    case Family::Cui: {
      const double x1 = x[0], x2 = x[1], x3 = x[2];
      const double below = x1 < 0.5 ? 1.0 : 0.0;
      switch (spec.dgp_index) {
        case 1: {
          std::normal_distribution<double> eps(0.0, 1.0);
          const double lp = -1.85 - 0.8 * below + 0.7 * std::sqrt(x2) + 0.2 * x3 +
                            (0.7 - 0.4 * below - 0.4 * std::sqrt(x2)) * a;
          return std::exp(lp + eps(rng));
        }
        case 2: {
          // Cumulative baseline hazard t^{1/2}: T = (E e^{-f})^2.
          std::exponential_distribution<double> e1(1.0);
          const double f = x1 + (-0.5 + x2) * a;
          const double root = e1(rng) * std::exp(-f);
          return root * root;
        }
        default:
          return zero_truncated_poisson(cui_poisson_mean(spec.dgp_index, a, x), rng);
      }
    }
    case Family::Hu: {
      // d_a scales time: S(t) = exp(-t^2 e^{f_a} / d_a).
      std::exponential_distribution<double> e1(1.0);
      const double scale = a == 1 ? kHuScaleTreated : kHuScaleControl;
      return std::pow(scale * e1(rng) / std::exp(hu_f(spec.dgp_index, a, x)), 1.0 / kHuShape);
    }
  }
  throw std::logic_error("unknown family");
}

}  // namespace detail

/// Constant effect used by the null-HTE variant of a design.
inline double null_effect_constant(Family family, int dgp_index) {
  return null_constants::lookup(static_cast<int>(family), dgp_index);
}

inline DgpSpec make_null_variant(const DgpSpec& spec) {
  DgpSpec out = spec;
  out.null_hte = true;
  return out;
}

/// Draws T(a) for one individual. Null variants scale the control-arm draw by
/// exp(c), which makes theta(x) = c for every x whatever the family.
inline double draw_event_time(const DgpSpec& spec, std::span<const double> x, int a, Rng& rng) {
  detail::check_dim(spec, x);
  if (spec.null_hte && a == 1) {
    const double c = null_effect_constant(spec.family, spec.dgp_index);
    return std::exp(c) * detail::draw_time_original(spec, x, 0, rng);
  }
  return detail::draw_time_original(spec, x, a, rng);
}

/// theta(x) = E[log T(1) | x] - E[log T(0) | x], exact.
inline double analytic_theta(const DgpSpec& spec, std::span<const double> x) {
  detail::check_dim(spec, x);
  if (spec.null_hte) return null_effect_constant(spec.family, spec.dgp_index);
  switch (spec.family) {
    case Family::Henderson: return detail::henderson_effect(x);
    case Family::Cui:
      switch (spec.dgp_index) {
        case 1: return 0.7 - 0.4 * (x[0] < 0.5 ? 1.0 : 0.0) - 0.4 * std::sqrt(x[1]);
        case 2: return 1.0 - 2.0 * x[1];
        default:
          return detail::zero_truncated_poisson_mean_log(
                     detail::cui_poisson_mean(spec.dgp_index, 1, x)) -
                 detail::zero_truncated_poisson_mean_log(
                     detail::cui_poisson_mean(spec.dgp_index, 0, x));
      }
    case Family::Hu:
      return (std::log(detail::kHuScaleTreated / detail::kHuScaleControl) +
              detail::hu_f(spec.dgp_index, 0, x) - detail::hu_f(spec.dgp_index, 1, x)) /
             detail::kHuShape;
  }
  throw std::logic_error("unknown family");
}

inline Eigen::MatrixXd gen_cui_covariates(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("n must be positive");
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const Eigen::MatrixXd& L = detail::cui_cholesky();
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), 15);
  Eigen::VectorXd u(15);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (int j = 0; j < 15; ++j) u(j) = unif(rng);
    X.row(i) = (L * u).transpose();
  }
  return X;
}

inline Eigen::MatrixXd gen_hu_covariates(std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("n must be positive");
  Rng rng = make_rng(seed);
  std::normal_distribution<double> cont(0.0, 0.35);
  std::bernoulli_distribution bin(0.5);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), 10);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    for (int j = 0; j < 5; ++j) X(i, j) = cont(rng);
    for (int j = 5; j < 10; ++j) X(i, j) = bin(rng) ? 1.0 : 0.0;
  }
  return X;
}

inline Eigen::MatrixXd gen_covariates(Family family, std::size_t n, std::uint64_t seed) {
  return family == Family::Cui ? gen_cui_covariates(n, seed) : gen_hu_covariates(n, seed);
}

inline double propensity_true(const DgpSpec& spec, std::span<const double> x) {
  detail::check_dim(spec, x);
  double e = 0.0;
  switch (spec.family) {
    case Family::Henderson: e = logistic(0.2 + 0.5 * x[0] - 0.4 * x[5]); break;
    case Family::Cui:
      switch (spec.dgp_index) {
        case 1:
        case 3: e = (1.0 + detail::beta24_pdf(x[0])) / 4.0; break;
        case 2: e = (1.0 + detail::beta24_pdf(x[1])) / 4.0; break;
        default: e = 1.0 / ((1.0 + std::exp(-x[0])) * (1.0 + std::exp(-x[1]))); break;
      }
      break;
    case Family::Hu:
      e = logistic(0.3 - 0.25 * x[0] - 2.25 * x[1] - 0.75 * x[2] - 0.25 * x[4] - 0.25 * x[5] -
                   0.5 * x[6] - 1.0 * x[8] + 1.25 * x[9]);
      break;
  }
  if (e <= 0.0) e = 0.005;
  if (e >= 1.0) e = 0.995;
  return e;
}

struct SurvivalTimes {
  std::vector<double> T;
  std::vector<double> theta_true;
};

inline SurvivalTimes sample_survival_times(const DgpSpec& spec, const Eigen::MatrixXd& X,
                                           std::span<const int> A, std::uint64_t seed) {
  if (static_cast<std::size_t>(X.rows()) != A.size())
    throw std::invalid_argument("X and A have different lengths");
  Rng rng = make_rng(seed);
  SurvivalTimes out;
  out.T.resize(A.size());
  out.theta_true.resize(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) {
    if (A[i] != 0 && A[i] != 1) throw std::invalid_argument("treatment must be 0/1");
    const auto x = detail::row(X, static_cast<Eigen::Index>(i));
    out.T[i] = draw_event_time(spec, x, A[i], rng);
    out.theta_true[i] = analytic_theta(spec, x);
    if (!std::isfinite(out.T[i]) || !(out.T[i] > 0.0) || !std::isfinite(out.theta_true[i]))
      throw std::runtime_error("non-finite event time or effect at row " + std::to_string(i));
  }
  return out;
}

/// Censoring times, before the administrative cap.
inline std::vector<double> sample_censoring(const DgpSpec& spec, const Eigen::MatrixXd& X,
                                            std::span<const int> A, std::uint64_t seed) {
  if (static_cast<std::size_t>(X.rows()) != A.size())
    throw std::invalid_argument("X and A have different lengths");
  Rng rng = make_rng(seed);
  std::vector<double> C(A.size());
  for (std::size_t i = 0; i < A.size(); ++i) {
    const auto x = detail::row(X, static_cast<Eigen::Index>(i));
    switch (spec.family) {
      case Family::Henderson: {
        std::uniform_real_distribution<double> d(6.5, 10.0);
        C[i] = d(rng);
        break;
      }
      case Family::Hu: {
        std::exponential_distribution<double> d(0.007);
        C[i] = d(rng);
        break;
      }
      case Family::Cui:
        switch (spec.dgp_index) {
          case 1: {
            // Censoring hazard 2t e^f, i.e. cumulative hazard t^2 e^f.
            const double below = x[0] < 0.5 ? 1.0 : 0.0;
            const double f = -1.75 - 0.5 * std::sqrt(x[1]) + 0.2 * x[2] +
                             (1.15 + 0.5 * below - 0.3 * std::sqrt(x[1])) * A[i];
            std::exponential_distribution<double> e1(1.0);
            C[i] = std::sqrt(e1(rng) * std::exp(-f));
            break;
          }
          case 2: {
            std::uniform_real_distribution<double> d(0.0, 3.0);
            C[i] = d(rng);
            break;
          }
          case 3:
            C[i] = detail::zero_truncated_poisson(12.0 + std::log1p(std::exp(x[2])), rng);
            break;
          default:
            C[i] = detail::zero_truncated_poisson(1.0 + std::log1p(std::exp(x[2])), rng);
            break;
        }
        break;
    }
  }
  return C;
}

/// Full pipeline for one dataset. Henderson designs keep covariates and
/// treatment fixed across seeds; only residuals and censoring vary.
inline SurvivalDataset generate(const DgpSpec& spec) {
  spec.validate();
  const std::uint64_t design_seed =
      spec.family == Family::Henderson ? detail::kHendersonDesignSeed : spec.seed;
  SurvivalDataset d;
  d.X = gen_covariates(spec.family, spec.n, derive_seed(design_seed, detail::kCovariates));

  Rng trt_rng = make_rng(derive_seed(design_seed, detail::kTreatment));
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  d.A.resize(spec.n);
  d.e_true.resize(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    d.e_true[i] = propensity_true(spec, detail::row(d.X, static_cast<Eigen::Index>(i)));
    d.A[i] = unif(trt_rng) < d.e_true[i] ? 1 : 0;
  }

  auto times = sample_survival_times(spec, d.X, d.A, derive_seed(spec.seed, detail::kEventTimes));
  auto C = sample_censoring(spec, d.X, d.A, derive_seed(spec.seed, detail::kCensoring));
  const double cap = admin_cap(spec);
  d.Y.resize(spec.n);
  d.delta.resize(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const double limit = std::min(C[i], cap);
    d.delta[i] = times.T[i] <= limit ? 1 : 0;
    d.Y[i] = std::min(times.T[i], limit);
  }
  d.theta_true = std::move(times.theta_true);
  d.T_latent = std::move(times.T);
  return d;
}

struct OracleEstimate {
  double value = 0.0;
  double se = 0.0;
};

/// Brute-force Monte-Carlo estimate of theta(x) from the counterfactual samplers.
inline OracleEstimate true_theta_oracle(const DgpSpec& spec, std::span<const double> x,
                                        std::size_t n_mc, std::uint64_t seed) {
  if (n_mc < 100000) throw std::invalid_argument("n_mc must be at least 1e5");
  Rng rng = make_rng(seed);
  // Welford accumulators per arm.
  std::array<double, 2> m{0.0, 0.0}, s{0.0, 0.0};
  for (std::size_t k = 0; k < n_mc; ++k) {
    for (int a = 0; a < 2; ++a) {
      const double v = std::log(draw_event_time(spec, x, a, rng));
      const double delta = v - m[a];
      m[a] += delta / static_cast<double>(k + 1);
      s[a] += delta * (v - m[a]);
    }
  }
  const double nm = static_cast<double>(n_mc);
  const double var1 = s[1] / (nm - 1.0), var0 = s[0] / (nm - 1.0);
  return {m[1] - m[0], std::sqrt(var1 / nm + var0 / nm)};
}

/// Covariate-population mean of the original (non-null) effect; this is what
/// the frozen null-variant table stores.
inline double compute_null_constant(Family family, int dgp_index, std::size_t n_draws,
                                    std::uint64_t seed) {
  const DgpSpec spec = DgpSpec::make(family, dgp_index, 1, seed);
  const Eigen::MatrixXd X = gen_covariates(family, n_draws, seed);
  std::vector<double> th(n_draws);
  for (std::size_t i = 0; i < n_draws; ++i)
    th[i] = analytic_theta(spec, detail::row(X, static_cast<Eigen::Index>(i)));
  return mean(th);
}

/// CSV with columns id,A,Y,delta,theta_true,e_true,x1..xp.
inline void write_dataset_csv(const SurvivalDataset& d, std::ostream& os) {
  os << "id,A,Y,delta,theta_true,e_true";
  for (Eigen::Index j = 0; j < d.X.cols(); ++j) os << ",x" << (j + 1);
  os << '\n';
  for (std::size_t i = 0; i < d.size(); ++i) {
    os << (i + 1) << ',' << d.A[i] << ',' << format_double(d.Y[i]) << ',' << d.delta[i] << ','
       << format_double(d.theta_true[i]) << ',' << format_double(d.e_true[i]);
    for (Eigen::Index j = 0; j < d.X.cols(); ++j)
      os << ',' << format_double(d.X(static_cast<Eigen::Index>(i), j));
    os << '\n';
  }
}

}  // namespace survhte
