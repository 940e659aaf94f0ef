#pragma once

// Random survival forest with log-rank splitting and per-leaf Kaplan-Meier
// curves. Used here to estimate the censoring survival function S_C(t | x).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "survhte/common.hpp"

namespace survhte::forest {

struct SurvivalTreeOptions {
  std::size_t min_node_size = 15;
  double min_leaf_fraction = 0.05;  // leaves also hold this share of the estimation sample
  std::size_t mtry = 0;             // 0 means all covariates
};

namespace detail {

class Fenwick {
 public:
  explicit Fenwick(std::size_t n) : t_(n + 1, 0.0) {}
  void add(std::size_t i, double v) {
    for (++i; i < t_.size(); i += i & (~i + 1)) t_[i] += v;
  }
  // Sum over indices [0, i).
  double prefix(std::size_t i) const {
    double s = 0.0;
    for (; i > 0; i -= i & (~i + 1)) s += t_[i];
    return s;
  }

 private:
  std::vector<double> t_;
};

}  // namespace detail

/// Step function S(t) with S(t) = prod over event times u <= t of (1 - d/Y).
struct KaplanMeier {
  std::vector<double> times;
  std::vector<double> surv;

  static KaplanMeier fit(std::span<const double> time, std::span<const int> event,
                         std::span<const std::size_t> idx) {
    std::vector<std::size_t> order(idx.begin(), idx.end());
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return time[a] < time[b]; });
    KaplanMeier km;
    double s = 1.0;
    std::size_t at_risk = order.size();
    for (std::size_t k = 0; k < order.size();) {
      const double t = time[order[k]];
      std::size_t d = 0, m = 0;
      for (; k < order.size() && time[order[k]] == t; ++k, ++m) d += static_cast<std::size_t>(event[order[k]]);
      if (d > 0) {
        s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
        km.times.push_back(t);
        km.surv.push_back(s);
      }
      at_risk -= m;
    }
    return km;
  }

  double at(double t) const {
    const auto k = std::upper_bound(times.begin(), times.end(), t) - times.begin();
    return k == 0 ? 1.0 : surv[static_cast<std::size_t>(k - 1)];
  }
  /// Left limit S(t-).
  double before(double t) const {
    const auto k = std::lower_bound(times.begin(), times.end(), t) - times.begin();
    return k == 0 ? 1.0 : surv[static_cast<std::size_t>(k - 1)];
  }
};

class SurvivalTree {
 public:
  struct Node {
    int var = -1;
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    int leaf = -1;  // index into curves_
    bool is_leaf() const { return var < 0; }
  };

  /// Grows the structure on the first `1 - honesty` share of `samples` and
  /// fits leaf curves on the rest; splits that leave a child without
  /// estimation samples are collapsed. honesty = 0 uses all samples for both.
  static SurvivalTree grow(const Eigen::MatrixXd& X, std::span<const double> time, std::span<const int> event,
                           std::vector<std::size_t> samples, const SurvivalTreeOptions& opts, Rng& rng,
                           double honesty = 0.0) {
    if (samples.empty()) throw std::invalid_argument("cannot grow a tree on no samples");
    std::vector<std::size_t> estimation;
    if (honesty > 0.0 && samples.size() >= 2) {
      const auto cut = static_cast<std::size_t>(std::ceil((1.0 - honesty) * static_cast<double>(samples.size())));
      estimation.assign(samples.begin() + static_cast<std::ptrdiff_t>(cut), samples.end());
      samples.resize(cut);
    } else {
      estimation = samples;
    }
    const std::size_t min_leaf = std::max(
        opts.min_node_size,
        static_cast<std::size_t>(std::ceil(opts.min_leaf_fraction * static_cast<double>(estimation.size()))));
    SurvivalTree tree;
    tree.nodes_.push_back({});
    std::vector<std::pair<int, std::vector<std::size_t>>> stack;
    stack.emplace_back(0, std::move(samples));
    const auto p = static_cast<std::size_t>(X.cols());
    std::vector<std::size_t> vars(p);
    std::iota(vars.begin(), vars.end(), 0);
    const std::size_t mtry = opts.mtry == 0 ? p : std::min(opts.mtry, p);

    while (!stack.empty()) {
      auto [node, idx] = std::move(stack.back());
      stack.pop_back();
      Split best;
      if (idx.size() >= 2 * min_leaf) {
        for (std::size_t k = 0; k < mtry; ++k) {
          std::uniform_int_distribution<std::size_t> pick(k, p - 1);
          std::swap(vars[k], vars[pick(rng)]);
        }
        best = find_split(X, time, event, idx, std::span(vars).first(mtry), min_leaf);
      }
      if (best.var < 0) continue;
      std::vector<std::size_t> left, right;
      for (std::size_t i : idx) (X(static_cast<Eigen::Index>(i), best.var) <= best.threshold ? left : right).push_back(i);
      const int l = static_cast<int>(tree.nodes_.size());
      tree.nodes_.push_back({});
      tree.nodes_.push_back({});
      auto& nd = tree.nodes_[static_cast<std::size_t>(node)];
      nd.var = best.var;
      nd.threshold = best.threshold;
      nd.left = l;
      nd.right = l + 1;
      stack.emplace_back(l + 1, std::move(right));
      stack.emplace_back(l, std::move(left));
    }

    std::vector<std::vector<std::size_t>> members(tree.nodes_.size());
    for (std::size_t i : estimation) members[static_cast<std::size_t>(tree.leaf_node(X, static_cast<Eigen::Index>(i)))].push_back(i);
    tree.prune_small(0, members, honesty > 0.0 ? min_leaf : 1);
    for (std::size_t k = 0; k < tree.nodes_.size(); ++k) {
      auto& nd = tree.nodes_[k];
      if (!nd.is_leaf() || !tree.reachable(static_cast<int>(k))) continue;
      nd.leaf = static_cast<int>(tree.curves_.size());
      tree.curves_.push_back(KaplanMeier::fit(time, event, members[k]));
    }
    return tree;
  }

  int leaf_node(const Eigen::MatrixXd& X, Eigen::Index row) const {
    int k = 0;
    while (!nodes_[static_cast<std::size_t>(k)].is_leaf()) {
      const auto& nd = nodes_[static_cast<std::size_t>(k)];
      k = X(row, nd.var) <= nd.threshold ? nd.left : nd.right;
    }
    return k;
  }

  const KaplanMeier& curve(const Eigen::MatrixXd& X, Eigen::Index row) const {
    return curves_[static_cast<std::size_t>(nodes_[static_cast<std::size_t>(leaf_node(X, row))].leaf)];
  }

  const std::vector<Node>& nodes() const { return nodes_; }

  /// Log-rank statistic of splitting `idx` into `left` and the rest, computed
  /// directly. Reference implementation for the sweep in find_split.
  static double logrank(std::span<const double> time, std::span<const int> event,
                        std::span<const std::size_t> idx, std::span<const char> in_left) {
    std::vector<double> ts;
    for (std::size_t k = 0; k < idx.size(); ++k)
      if (event[idx[k]]) ts.push_back(time[idx[k]]);
    std::sort(ts.begin(), ts.end());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
    double u = 0.0, v = 0.0;
    for (double t : ts) {
      double y = 0, yl = 0, d = 0, dl = 0;
      for (std::size_t k = 0; k < idx.size(); ++k) {
        const std::size_t i = idx[k];
        if (time[i] < t) continue;
        y += 1;
        yl += in_left[k];
        if (time[i] == t && event[i]) {
          d += 1;
          dl += in_left[k];
        }
      }
      u += dl - yl * d / y;
      if (y > 1) v += yl / y * (1 - yl / y) * (y - d) / (y - 1) * d;
    }
    return v > 0 ? u * u / v : 0.0;
  }

  struct Split {
    int var = -1;
    double threshold = 0.0;
    double stat = 0.0;
  };

  // Sweeps each candidate variable in sorted order, moving one sample at a
  // time into the left child. With k_i the number of node event times <= Y_i:
  //   U_L = sum_{i in L} (e_i - H(k_i)),
  //   V_L = sum_{i in L} C(k_i) - sum_j c'_j Y_Lj^2,
  // and the squared term is maintained through two Fenwick trees over k.
  static Split find_split(const Eigen::MatrixXd& X, std::span<const double> time, std::span<const int> event,
                          const std::vector<std::size_t>& idx, std::span<const std::size_t> vars,
                          std::size_t min_node) {
    const std::size_t m = idx.size();
    std::vector<double> ts;
    for (std::size_t i : idx)
      if (event[i]) ts.push_back(time[i]);
    Split best;
    if (ts.empty()) return best;
    std::sort(ts.begin(), ts.end());
    std::vector<double> d;
    std::vector<double> uniq;
    for (std::size_t k = 0; k < ts.size(); ++k) {
      if (uniq.empty() || ts[k] != uniq.back()) {
        uniq.push_back(ts[k]);
        d.push_back(0.0);
      }
      d.back() += 1.0;
    }
    const std::size_t T = uniq.size();
    std::vector<std::size_t> rank(m);
    std::vector<double> risk(T, 0.0);
    for (std::size_t k = 0; k < m; ++k) {
      rank[k] = static_cast<std::size_t>(std::upper_bound(uniq.begin(), uniq.end(), time[idx[k]]) - uniq.begin());
      if (rank[k] > 0) risk[rank[k] - 1] += 1.0;
    }
    for (std::size_t j = T - 1; j-- > 0;) risk[j] += risk[j + 1];
    // Prefix tables indexed by rank (number of event times <= Y).
    std::vector<double> H(T + 1, 0.0), C(T + 1, 0.0), Cp(T + 1, 0.0);
    std::vector<double> cp(T);
    for (std::size_t j = 0; j < T; ++j) {
      const double y = risk[j];
      const double c = y > 1 ? d[j] * (y - d[j]) / (y * (y - 1)) : 0.0;
      cp[j] = c / y;
      H[j + 1] = H[j] + d[j] / y;
      C[j + 1] = C[j] + c;
      Cp[j + 1] = Cp[j] + cp[j];
    }

    best.stat = 1e-10;
    std::vector<std::size_t> order(m);
    for (std::size_t v : vars) {
      std::iota(order.begin(), order.end(), 0);
      const auto col = X.col(static_cast<Eigen::Index>(v));
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return col(static_cast<Eigen::Index>(idx[a])) < col(static_cast<Eigen::Index>(idx[b]));
      });
      detail::Fenwick count(T + 1), cpsum(T + 1);
      double u = 0.0, lin = 0.0, quad = 0.0;
      for (std::size_t s = 0; s + 1 < m; ++s) {
        const std::size_t k = order[s];
        const std::size_t r = rank[k];
        // sum_{j<=r} c'_j * Y_Lj before adding k, then Y_Lj += 1 for j <= r.
        const double cross = Cp[r] * (count.prefix(T + 1) - count.prefix(r)) + cpsum.prefix(r);
        quad += 2.0 * cross + Cp[r];
        lin += C[r];
        u += event[idx[k]] - H[r];
        count.add(r, 1.0);
        cpsum.add(r, Cp[r]);

        const std::size_t nl = s + 1;
        if (nl < min_node) continue;
        if (m - nl < min_node) break;
        const double x0 = col(static_cast<Eigen::Index>(idx[k]));
        const double x1 = col(static_cast<Eigen::Index>(idx[order[s + 1]]));
        if (x0 == x1) continue;
        const double var = lin - quad;
        if (var <= 1e-12) continue;
        const double stat = u * u / var;
        if (stat > best.stat) {
          best.stat = stat;
          best.var = static_cast<int>(v);
          double mid = 0.5 * (x0 + x1);
          if (!(mid < x1)) mid = x0;
          best.threshold = mid;
        }
      }
    }
    return best;
  }

 private:
  void prune_small(int k, std::vector<std::vector<std::size_t>>& members, std::size_t min_size) {
    auto& nd = nodes_[static_cast<std::size_t>(k)];
    if (nd.is_leaf()) return;
    const int l = nd.left, r = nd.right;
    prune_small(l, members, min_size);
    prune_small(r, members, min_size);
    const auto empty = [&](int c) {
      return nodes_[static_cast<std::size_t>(c)].is_leaf() && members[static_cast<std::size_t>(c)].size() < min_size;
    };
    if (!empty(l) && !empty(r)) return;
    auto& merged = members[static_cast<std::size_t>(k)];
    for (int c : {l, r}) {
      collect(c, members, merged);
    }
    std::sort(merged.begin(), merged.end());
    auto& target = nodes_[static_cast<std::size_t>(k)];
    target.var = -1;
    target.left = target.right = -1;
  }

  void collect(int k, std::vector<std::vector<std::size_t>>& members, std::vector<std::size_t>& out) const {
    const auto& nd = nodes_[static_cast<std::size_t>(k)];
    if (nd.is_leaf()) {
      auto& m = members[static_cast<std::size_t>(k)];
      out.insert(out.end(), m.begin(), m.end());
      m.clear();
      return;
    }
    collect(nd.left, members, out);
    collect(nd.right, members, out);
  }

  bool reachable(int target) const {
    int k = 0;
    std::vector<int> stack{0};
    while (!stack.empty()) {
      k = stack.back();
      stack.pop_back();
      if (k == target) return true;
      const auto& nd = nodes_[static_cast<std::size_t>(k)];
      if (!nd.is_leaf()) {
        stack.push_back(nd.left);
        stack.push_back(nd.right);
      }
    }
    return false;
  }

  std::vector<Node> nodes_;
  std::vector<KaplanMeier> curves_;
};

struct SurvivalForestOptions {
  std::size_t num_trees = 500;
  double sample_fraction = 0.5;
  SurvivalTreeOptions tree;
  std::size_t workers = 1;
  double honesty = 0.5;
  double floor = 0.05;
};

/// Forest-averaged survival curves, floored at `floor`.
class SurvivalForest {
 public:
  static SurvivalForest fit(const Eigen::MatrixXd& X, std::span<const double> time, std::span<const int> event,
                            const SurvivalForestOptions& opts, std::uint64_t seed) {
    const auto n = static_cast<std::size_t>(X.rows());
    if (time.size() != n || event.size() != n) throw std::invalid_argument("inconsistent input lengths");
    SurvivalForest f;
    f.floor_ = opts.floor;
    f.trees_.resize(opts.num_trees);
    f.inbag_.resize(opts.num_trees);
    const std::size_t size =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(opts.sample_fraction * static_cast<double>(n))));
    parallel_for(opts.num_trees, opts.workers, [&](std::size_t t) {
      Rng rng = make_rng(derive_seed(seed, t));
      std::vector<std::size_t> pool(n);
      std::iota(pool.begin(), pool.end(), 0);
      for (std::size_t k = 0; k < size; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, n - 1);
        std::swap(pool[k], pool[pick(rng)]);
      }
      pool.resize(size);
      std::vector<char> in(n, 0);
      for (std::size_t i : pool) in[i] = 1;
      f.inbag_[t] = std::move(in);
      f.trees_[t] = SurvivalTree::grow(X, time, event, std::move(pool), opts.tree, rng, opts.honesty);
    });
    return f;
  }

  /// S(t- | x) averaged over all trees.
  double survival_before(const Eigen::MatrixXd& X, Eigen::Index row, double t) const {
    std::vector<double> v(trees_.size());
    for (std::size_t k = 0; k < trees_.size(); ++k) v[k] = trees_[k].curve(X, row).before(t);
    return std::max(mean(v), floor_);
  }

  /// Out-of-bag S(t- | x_i) for a training row.
  double survival_before_oob(const Eigen::MatrixXd& X, std::size_t row, double t) const {
    std::vector<double> v;
    for (std::size_t k = 0; k < trees_.size(); ++k)
      if (!inbag_[k][row]) v.push_back(trees_[k].curve(X, static_cast<Eigen::Index>(row)).before(t));
    if (v.empty()) return survival_before(X, static_cast<Eigen::Index>(row), t);
    return std::max(mean(v), floor_);
  }

  const std::vector<SurvivalTree>& trees() const { return trees_; }

 private:
  double floor_ = 0.05;
  std::vector<SurvivalTree> trees_;
  std::vector<std::vector<char>> inbag_;
};

/// Censoring survival S_C(t- | x) estimated by a survival forest on the
/// flipped indicator. Degenerates to the constant 1 when nothing is censored.
class CensoringModel {
 public:
  static CensoringModel fit(const Eigen::MatrixXd& X, std::span<const double> Y, std::span<const int> delta,
                            const SurvivalForestOptions& opts, std::uint64_t seed) {
    CensoringModel m;
    std::vector<int> cens(delta.size());
    for (std::size_t i = 0; i < delta.size(); ++i) cens[i] = 1 - delta[i];
    if (std::none_of(cens.begin(), cens.end(), [](int c) { return c == 1; })) {
      m.no_censoring_ = true;
      return m;
    }
    m.forest_ = SurvivalForest::fit(X, Y, cens, opts, seed);
    return m;
  }

  bool no_censoring() const { return no_censoring_; }

  double evaluate(const Eigen::MatrixXd& X, Eigen::Index row, double t) const {
    return no_censoring_ ? 1.0 : forest_.survival_before(X, row, t);
  }
  double evaluate_oob(const Eigen::MatrixXd& X, std::size_t row, double t) const {
    return no_censoring_ ? 1.0 : forest_.survival_before_oob(X, row, t);
  }

 private:
  bool no_censoring_ = false;
  SurvivalForest forest_;
};

inline std::size_t default_survival_mtry(std::size_t p) {
  return std::min(p, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(p)) + 20.0)));
}

}  // namespace survhte::forest
