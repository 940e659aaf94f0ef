#pragma once

// CART regression trees with optional case weights and honest re-population,
// and a subsampled forest with out-of-bag prediction.

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

struct TreeOptions {
  std::size_t min_node_size = 5;  // minimum samples in each child of a split
  std::size_t mtry = 0;           // 0 means all covariates
};

struct TreeNode {
  int var = -1;
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;
  std::size_t count = 0;

  bool is_leaf() const { return var < 0; }
};

class RegressionTree {
 public:
  /// Grows a tree on `samples` (row indices into X/y). `w` may be empty for
  /// unit weights.
  static RegressionTree grow(const Eigen::MatrixXd& X, std::span<const double> y,
                             std::span<const double> w, std::vector<std::size_t> samples,
                             const TreeOptions& opts, Rng& rng) {
    if (samples.empty()) throw std::invalid_argument("cannot grow a tree on no samples");
    RegressionTree tree;
    tree.nodes_.push_back({});
    tree.samples_.push_back(std::move(samples));
    std::vector<int> stack{0};
    const auto p = static_cast<std::size_t>(X.cols());
    std::vector<std::size_t> vars(p);
    std::iota(vars.begin(), vars.end(), 0);
    const std::size_t mtry = opts.mtry == 0 ? p : std::min(opts.mtry, p);

    while (!stack.empty()) {
      const int node = stack.back();
      stack.pop_back();
      auto& idx = tree.samples_[static_cast<std::size_t>(node)];
      tree.set_leaf_value(node, y, w);
      if (idx.size() < 2 * opts.min_node_size || idx.size() < 2) continue;

      // Partial Fisher-Yates: the first mtry entries are the candidates.
      for (std::size_t k = 0; k < mtry; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, p - 1);
        std::swap(vars[k], vars[pick(rng)]);
      }
      const Split best = find_split(X, y, w, idx, std::span(vars).first(mtry), opts);
      if (best.var < 0) continue;

      std::vector<std::size_t> left, right;
      for (std::size_t i : idx) (X(static_cast<Eigen::Index>(i), best.var) <= best.threshold ? left : right).push_back(i);
      const int l = static_cast<int>(tree.nodes_.size());
      tree.nodes_.push_back({});
      tree.nodes_.push_back({});
      tree.samples_.push_back(std::move(left));
      tree.samples_.push_back(std::move(right));
      auto& nd = tree.nodes_[static_cast<std::size_t>(node)];
      nd.var = best.var;
      nd.threshold = best.threshold;
      nd.left = l;
      nd.right = l + 1;
      tree.samples_[static_cast<std::size_t>(node)].clear();
      tree.samples_[static_cast<std::size_t>(node)].shrink_to_fit();
      stack.push_back(l + 1);
      stack.push_back(l);
    }
    return tree;
  }

  int leaf_of(const Eigen::MatrixXd& X, Eigen::Index row) const {
    int node = 0;
    while (!nodes_[static_cast<std::size_t>(node)].is_leaf()) {
      const auto& nd = nodes_[static_cast<std::size_t>(node)];
      node = X(row, nd.var) <= nd.threshold ? nd.left : nd.right;
    }
    return node;
  }

  double predict(const Eigen::MatrixXd& X, Eigen::Index row) const {
    return nodes_[static_cast<std::size_t>(leaf_of(X, row))].value;
  }

  /// Honest estimation: discards the growing samples, routes `estimation`
  /// samples down the fixed structure, collapses splits whose children hold
  /// fewer than `min_node_size` of them, and sets leaf values to their mean.
  void repopulate(const Eigen::MatrixXd& X, std::span<const double> y,
                  std::span<const std::size_t> estimation, std::size_t min_node_size) {
    for (auto& s : samples_) s.clear();
    for (std::size_t i : estimation)
      samples_[static_cast<std::size_t>(leaf_of(X, static_cast<Eigen::Index>(i)))].push_back(i);
    prune(0, min_node_size);
    for (auto& s : samples_) s.clear();
    for (std::size_t i : estimation)
      samples_[static_cast<std::size_t>(leaf_of(X, static_cast<Eigen::Index>(i)))].push_back(i);
    for (int k : leaves()) set_leaf_value(k, y, {});
  }

  const std::vector<TreeNode>& nodes() const { return nodes_; }
  const std::vector<std::size_t>& leaf_samples(int node) const {
    return samples_[static_cast<std::size_t>(node)];
  }

  /// Leaves reachable from the root.
  std::vector<int> leaves() const {
    std::vector<int> out, stack{0};
    while (!stack.empty()) {
      const int k = stack.back();
      stack.pop_back();
      const auto& nd = nodes_[static_cast<std::size_t>(k)];
      if (nd.is_leaf()) {
        out.push_back(k);
      } else {
        stack.push_back(nd.right);
        stack.push_back(nd.left);
      }
    }
    return out;
  }

 private:
  struct Split {
    int var = -1;
    double threshold = 0.0;
    double gain = 0.0;
  };

  static Split find_split(const Eigen::MatrixXd& X, std::span<const double> y,
                          std::span<const double> w, const std::vector<std::size_t>& idx,
                          std::span<const std::size_t> vars, const TreeOptions& opts) {
    const std::size_t m = idx.size();
    double sw = 0.0, swy = 0.0, ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
    for (std::size_t i : idx) {
      const double wi = w.empty() ? 1.0 : w[i];
      sw += wi;
      swy += wi * y[i];
      ymin = std::min(ymin, y[i]);
      ymax = std::max(ymax, y[i]);
    }
    Split best;
    if (ymax - ymin <= 1e-12 * (1.0 + std::abs(ymax))) return best;
    double ss = 0.0;
    const double ybar = swy / sw;
    for (std::size_t i : idx) ss += (w.empty() ? 1.0 : w[i]) * (y[i] - ybar) * (y[i] - ybar);
    const double base = swy * swy / sw;
    best.gain = 1e-10 * ss;

    struct Entry {
      double x, y, w;
    };
    std::vector<Entry> sorted(m);
    for (std::size_t v : vars) {
      for (std::size_t k = 0; k < m; ++k) {
        const std::size_t i = idx[k];
        sorted[k] = {X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(v)), y[i],
                     w.empty() ? 1.0 : w[i]};
      }
      std::sort(sorted.begin(), sorted.end(), [](const Entry& a, const Entry& b) { return a.x < b.x; });
      double lw = 0.0, lwy = 0.0;
      for (std::size_t k = 0; k + 1 < m; ++k) {
        lw += sorted[k].w;
        lwy += sorted[k].w * sorted[k].y;
        const std::size_t nl = k + 1;
        if (nl < opts.min_node_size) continue;
        if (m - nl < opts.min_node_size) break;
        if (sorted[k].x == sorted[k + 1].x) continue;
        const double rw = sw - lw, rwy = swy - lwy;
        if (lw <= 0.0 || rw <= 0.0) continue;
        const double gain = lwy * lwy / lw + rwy * rwy / rw - base;
        if (gain > best.gain) {
          best.gain = gain;
          best.var = static_cast<int>(v);
          double mid = 0.5 * (sorted[k].x + sorted[k + 1].x);
          if (!(mid < sorted[k + 1].x)) mid = sorted[k].x;
          best.threshold = mid;
        }
      }
    }
    return best;
  }

  void set_leaf_value(int node, std::span<const double> y, std::span<const double> w) {
    auto& nd = nodes_[static_cast<std::size_t>(node)];
    const auto& idx = samples_[static_cast<std::size_t>(node)];
    double sw = 0.0, swy = 0.0;
    for (std::size_t i : idx) {
      const double wi = w.empty() ? 1.0 : w[i];
      sw += wi;
      swy += wi * y[i];
    }
    nd.count = idx.size();
    nd.value = sw > 0.0 ? swy / sw : 0.0;
  }

  // Post-order collapse. Afterwards every leaf below `node` holds at least
  // min_size samples, except possibly `node` itself when it became a leaf.
  void prune(int node, std::size_t min_size) {
    auto& nd = nodes_[static_cast<std::size_t>(node)];
    if (nd.is_leaf()) return;
    const int l = nd.left, r = nd.right;
    prune(l, min_size);
    prune(r, min_size);
    const auto small = [&](int k) {
      return nodes_[static_cast<std::size_t>(k)].is_leaf() &&
             samples_[static_cast<std::size_t>(k)].size() < min_size;
    };
    if (small(l) || small(r)) {
      std::vector<std::size_t> merged;
      collect(node, merged);
      auto& target = nodes_[static_cast<std::size_t>(node)];
      target.var = -1;
      target.left = target.right = -1;
      samples_[static_cast<std::size_t>(node)] = std::move(merged);
    }
  }

  void collect(int node, std::vector<std::size_t>& out) {
    const auto& nd = nodes_[static_cast<std::size_t>(node)];
    if (nd.is_leaf()) {
      auto& s = samples_[static_cast<std::size_t>(node)];
      out.insert(out.end(), s.begin(), s.end());
      s.clear();
      return;
    }
    collect(nd.left, out);
    collect(nd.right, out);
  }

  std::vector<TreeNode> nodes_;
  std::vector<std::vector<std::size_t>> samples_;
};

struct ForestOptions {
  std::size_t num_trees = 200;
  double sample_fraction = 0.5;
  TreeOptions tree;
  std::size_t workers = 1;
};

/// Subsampled (without replacement) regression forest.
class RegressionForest {
 public:
  static RegressionForest fit(const Eigen::MatrixXd& X, std::span<const double> y,
                              std::span<const double> w, std::span<const std::size_t> train,
                              const ForestOptions& opts, std::uint64_t seed) {
    if (train.empty()) throw std::invalid_argument("empty training set");
    RegressionForest f;
    f.n_ = static_cast<std::size_t>(X.rows());
    f.trees_.resize(opts.num_trees);
    f.inbag_.resize(opts.num_trees);
    const std::size_t size = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(opts.sample_fraction * static_cast<double>(train.size()))));
    parallel_for(opts.num_trees, opts.workers, [&](std::size_t t) {
      Rng rng = make_rng(derive_seed(seed, t));
      std::vector<std::size_t> pool(train.begin(), train.end());
      for (std::size_t k = 0; k < size; ++k) {
        std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
        std::swap(pool[k], pool[pick(rng)]);
      }
      pool.resize(size);
      std::vector<char> in(f.n_, 0);
      for (std::size_t i : pool) in[i] = 1;
      f.inbag_[t] = std::move(in);
      f.trees_[t] = RegressionTree::grow(X, y, w, std::move(pool), opts.tree, rng);
    });
    return f;
  }

  double predict(const Eigen::MatrixXd& X, Eigen::Index row) const {
    std::vector<double> v(trees_.size());
    for (std::size_t t = 0; t < trees_.size(); ++t) v[t] = trees_[t].predict(X, row);
    return mean(v);
  }

  /// Out-of-bag prediction for a training row; falls back to the full forest
  /// when the row was in every subsample.
  double predict_oob(const Eigen::MatrixXd& X, std::size_t row) const {
    std::vector<double> v;
    for (std::size_t t = 0; t < trees_.size(); ++t)
      if (!inbag_[t][row]) v.push_back(trees_[t].predict(X, static_cast<Eigen::Index>(row)));
    if (v.empty()) return predict(X, static_cast<Eigen::Index>(row));
    return mean(v);
  }

  const std::vector<RegressionTree>& trees() const { return trees_; }

 private:
  std::size_t n_ = 0;
  std::vector<RegressionTree> trees_;
  std::vector<std::vector<char>> inbag_;
};

}  // namespace survhte::forest
