#pragma once

// Frozen constant effects for the null-HTE variants. Each value is the
// covariate-population mean of the original theta(x), averaged over 1e5
// covariate draws (compute_null_constant with kDraws and kSeed).
// Regenerate with `survhte null-table` and bump kVersion when a design changes.

#include <array>
#include <stdexcept>

namespace survhte::null_constants {

inline constexpr int kVersion = 1;
inline constexpr std::size_t kDraws = 100000;
inline constexpr unsigned long long kSeed = 20250101ULL;

// Indexed [family][dgp - 1], family order Henderson, Cui, Hu.
inline constexpr std::array<std::array<double, 4>, 3> kTable{{
    {0.39954412658227767, 0.39954412658227767, 0.39954412658227767, 0.39954412658227767},
    {0.17871608568496222, -0.36449814388905566, 0.09928432367364388, 0.08106875240247507},
    {0.3112786436320257, 0.44244176653380207, -0.0012551488144665111, 0.04268337590656597},
}};

inline double lookup(int family, int dgp_index) {
  if (family < 0 || family > 2 || dgp_index < 1 || dgp_index > 4)
    throw std::invalid_argument("no null constant for this design");
  return kTable[static_cast<std::size_t>(family)][static_cast<std::size_t>(dgp_index - 1)];
}

}  // namespace survhte::null_constants
