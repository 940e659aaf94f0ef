#pragma once

#include <boost/math/special_functions/erf.hpp>

#include <cmath>
#include <limits>
#include <random>

#include "survhte/common.hpp"

namespace survhte {

/// Exact draw from Normal(mu, sigma^2) conditioned on exceeding `lower`.
/// Inverse CDF on the upper tail for standardized bounds up to 4, Robert's
/// exponential rejection sampler beyond.
inline double sample_truncated_normal(double mu, double sigma, double lower, Rng& rng) {
  const double a = (lower - mu) / sigma;
  if (a > 4.0) {
    const double rate = 0.5 * (a + std::sqrt(a * a + 4.0));
    std::exponential_distribution<double> expo(rate);
    for (;;) {
      const double z = a + expo(rng);
      const double d = z - rate;
      if (uniform_open(rng) <= std::exp(-0.5 * d * d)) return mu + sigma * z;
    }
  }
  const double tail = std::isinf(a) ? 1.0 : 0.5 * std::erfc(a / std::sqrt(2.0));
  for (;;) {
    const double z = std::sqrt(2.0) * boost::math::erfc_inv(2.0 * uniform_open(rng) * tail);
    if (z > a) return mu + sigma * z;
  }
}

inline double sample_truncated_normal(double mu, double sigma, double lower, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  return sample_truncated_normal(mu, sigma, lower, rng);
}

}  // namespace survhte
