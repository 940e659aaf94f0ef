#pragma once

// Accelerated failure time BART: log T = m(A, x) + sigma * eps with a
// sum-of-trees m, censored log times imputed by data augmentation.

#include <Eigen/Dense>
#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "survhte/common.hpp"
#include "survhte/truncated_normal.hpp"

namespace survhte {

struct BartHyperparams {
  std::size_t num_trees = 200;
  double k = 2.0;
  double alpha = 0.95;
  double beta = 2.0;
  double nu = 3.0;
  double q = 0.90;
  std::size_t iterations = 2500;
  std::size_t burn_in = 500;
  std::size_t thin = 1;
  std::size_t num_cuts = 100;
  std::size_t min_leaf_size = 5;

  static BartHyperparams improved() {
    BartHyperparams h;
    h.k = 1.0;
    return h;
  }

  void validate() const {
    if (num_trees < 1) throw std::invalid_argument("num_trees must be >= 1");
    if (!(k > 0.0)) throw std::invalid_argument("k must be positive");
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must lie in (0, 1)");
    if (!(beta >= 0.0)) throw std::invalid_argument("beta must be non-negative");
    if (!(nu > 0.0) || !(q > 0.0 && q < 1.0)) throw std::invalid_argument("invalid sigma prior");
    if (burn_in >= iterations) throw std::invalid_argument("burn_in must be below iterations");
    if (thin < 1) throw std::invalid_argument("thin must be >= 1");
    if (num_cuts < 1 || min_leaf_size < 1) throw std::invalid_argument("invalid tree settings");
  }

  std::size_t retained() const { return (iterations - burn_in + thin - 1) / thin; }
};

namespace bart {

/// Candidate split points per covariate and the bin code of every
/// observation: x <= cut[k] exactly when code <= k.
class CutGrid {
 public:
  CutGrid() = default;
  CutGrid(const Eigen::MatrixXd& X, std::size_t num_cuts) : n_(static_cast<std::size_t>(X.rows())) {
    const auto p = static_cast<std::size_t>(X.cols());
    cuts_.resize(p);
    codes_.resize(p * n_);
    for (std::size_t v = 0; v < p; ++v) {
      std::vector<double> vals(X.col(static_cast<Eigen::Index>(v)).data(),
                               X.col(static_cast<Eigen::Index>(v)).data() + n_);
      std::sort(vals.begin(), vals.end());
      vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
      auto& c = cuts_[v];
      if (vals.size() <= num_cuts + 1) {
        for (std::size_t k = 0; k + 1 < vals.size(); ++k) c.push_back(0.5 * (vals[k] + vals[k + 1]));
      } else {
        const double lo = vals.front(), hi = vals.back();
        for (std::size_t k = 0; k < num_cuts; ++k)
          c.push_back(lo + (hi - lo) * static_cast<double>(k + 1) / static_cast<double>(num_cuts + 1));
      }
      for (std::size_t i = 0; i < n_; ++i) codes_[v * n_ + i] = encode(v, X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(v)));
    }
  }

  std::size_t num_vars() const { return cuts_.size(); }
  int num_cuts(std::size_t v) const { return static_cast<int>(cuts_[v].size()); }
  double cut_value(std::size_t v, int k) const { return cuts_[v][static_cast<std::size_t>(k)]; }
  int code(std::size_t v, std::size_t i) const { return codes_[v * n_ + i]; }
  int encode(std::size_t v, double x) const {
    return static_cast<int>(std::lower_bound(cuts_[v].begin(), cuts_[v].end(), x) - cuts_[v].begin());
  }

 private:
  std::size_t n_ = 0;
  std::vector<std::vector<double>> cuts_;
  std::vector<int> codes_;
};

/// Inclusive range of admissible cut indices per covariate.
using Ranges = std::vector<std::pair<int, int>>;

inline bool any_available(const Ranges& r) {
  return std::any_of(r.begin(), r.end(), [](const auto& lh) { return lh.first <= lh.second; });
}

class Tree {
 public:
  struct Node {
    int var = -1;
    int cut = -1;
    int left = -1;
    int right = -1;
    int parent = -1;
    int depth = 0;
    double mu = 0.0;
    std::vector<std::size_t> obs;  // sorted; leaves only

    bool is_leaf() const { return var < 0; }
  };

  Tree() = default;
  Tree(std::size_t n, double mu) {
    Node root;
    root.mu = mu;
    root.obs.resize(n);
    std::iota(root.obs.begin(), root.obs.end(), 0);
    nodes_.push_back(std::move(root));
  }

  const Node& node(int k) const { return nodes_[static_cast<std::size_t>(k)]; }
  void set_mu(int k, double mu) { nodes_[static_cast<std::size_t>(k)].mu = mu; }
  bool is_stump() const { return nodes_[0].is_leaf(); }

  std::vector<int> leaves() const {
    std::vector<int> out;
    visit([&](int k) {
      if (node(k).is_leaf()) out.push_back(k);
    });
    return out;
  }

  /// Internal nodes whose children are both leaves.
  std::vector<int> nogs() const {
    std::vector<int> out;
    visit([&](int k) {
      const auto& nd = node(k);
      if (!nd.is_leaf() && node(nd.left).is_leaf() && node(nd.right).is_leaf()) out.push_back(k);
    });
    return out;
  }

  std::size_t num_nodes() const {
    std::size_t c = 0;
    visit([&](int) { ++c; });
    return c;
  }

  bool splits_on(int var) const {
    bool found = false;
    visit([&](int k) { found = found || node(k).var == var; });
    return found;
  }

  Ranges ranges(int k, const CutGrid& grid) const {
    Ranges r(grid.num_vars());
    for (std::size_t v = 0; v < r.size(); ++v) r[v] = {0, grid.num_cuts(v) - 1};
    for (int child = k, parent = node(k).parent; parent >= 0; child = parent, parent = node(parent).parent) {
      const auto& p = node(parent);
      auto& lh = r[static_cast<std::size_t>(p.var)];
      if (p.left == child)
        lh.second = std::min(lh.second, p.cut - 1);
      else
        lh.first = std::max(lh.first, p.cut + 1);
    }
    return r;
  }

  int route(const CutGrid& grid, std::size_t i, int override_var = -1, int override_code = 0) const {
    int k = 0;
    while (!node(k).is_leaf()) {
      const auto& nd = node(k);
      const int c = nd.var == override_var ? override_code : grid.code(static_cast<std::size_t>(nd.var), i);
      k = c <= nd.cut ? nd.left : nd.right;
    }
    return k;
  }

  void split(int leaf, int var, int cut, const CutGrid& grid) {
    if (!node(leaf).is_leaf()) throw std::logic_error("split of an internal node");
    const int l = alloc(), r = alloc();
    auto& nd = nodes_[static_cast<std::size_t>(leaf)];
    auto& L = nodes_[static_cast<std::size_t>(l)];
    auto& R = nodes_[static_cast<std::size_t>(r)];
    for (std::size_t i : nd.obs) (grid.code(static_cast<std::size_t>(var), i) <= cut ? L : R).obs.push_back(i);
    nd.obs.clear();
    nd.var = var;
    nd.cut = cut;
    nd.left = l;
    nd.right = r;
    L.parent = R.parent = leaf;
    L.depth = R.depth = nd.depth + 1;
  }

  /// Inverse of split: turns a node with two leaf children back into a leaf.
  void collapse(int k) {
    auto& nd = nodes_[static_cast<std::size_t>(k)];
    if (nd.is_leaf() || !node(nd.left).is_leaf() || !node(nd.right).is_leaf())
      throw std::logic_error("collapse needs two leaf children");
    auto& L = nodes_[static_cast<std::size_t>(nd.left)];
    auto& R = nodes_[static_cast<std::size_t>(nd.right)];
    nd.obs.resize(L.obs.size() + R.obs.size());
    std::merge(L.obs.begin(), L.obs.end(), R.obs.begin(), R.obs.end(), nd.obs.begin());
    release(nd.left);
    release(nd.right);
    nd.var = nd.cut = nd.left = nd.right = -1;
  }

  bool same_structure(const Tree& o) const { return same(0, o, 0); }

 private:
  template <typename F>
  void visit(F&& f) const {
    std::vector<int> stack{0};
    while (!stack.empty()) {
      const int k = stack.back();
      stack.pop_back();
      f(k);
      const auto& nd = node(k);
      if (!nd.is_leaf()) {
        stack.push_back(nd.right);
        stack.push_back(nd.left);
      }
    }
  }

  bool same(int a, const Tree& o, int b) const {
    const auto& x = node(a);
    const auto& y = o.node(b);
    if (x.var != y.var || x.cut != y.cut || x.depth != y.depth) return false;
    if (x.is_leaf()) return x.obs == y.obs;
    return same(x.left, o, y.left) && same(x.right, o, y.right);
  }

  int alloc() {
    if (!free_.empty()) {
      const int k = free_.back();
      free_.pop_back();
      nodes_[static_cast<std::size_t>(k)] = Node{};
      return k;
    }
    nodes_.emplace_back();
    return static_cast<int>(nodes_.size() - 1);
  }

  void release(int k) {
    nodes_[static_cast<std::size_t>(k)] = Node{};
    free_.push_back(k);
  }

  std::vector<Node> nodes_;
  std::vector<int> free_;
};

/// Log marginal likelihood of a leaf with n residuals summing to s under a
/// Normal(0, tau^2) mean, dropping terms that cancel between partitions.
inline double leaf_log_marginal(std::size_t n, double s, double sigma, double tau) {
  const double s2 = sigma * sigma, t2 = tau * tau;
  const double denom = s2 + static_cast<double>(n) * t2;
  return 0.5 * std::log(s2 / denom) + t2 * s * s / (2.0 * s2 * denom);
}

inline double sum_over(const std::vector<std::size_t>& obs, std::span<const double> r) {
  double s = 0.0;
  for (std::size_t i : obs) s += r[i];
  return s;
}

inline double tree_log_likelihood(const Tree& t, std::span<const double> r, double sigma, double tau) {
  double ll = 0.0;
  for (int k : t.leaves()) {
    const auto& obs = t.node(k).obs;
    ll += leaf_log_marginal(obs.size(), sum_over(obs, r), sigma, tau);
  }
  return ll;
}

struct MoveStats {
  std::size_t proposed = 0;
  std::size_t accepted = 0;
  double rate() const { return proposed ? static_cast<double>(accepted) / static_cast<double>(proposed) : 0.0; }
};

/// Switches used by tests to freeze parts of the chain.
struct Control {
  bool update_trees = true;
  bool update_leaves = true;
  bool update_sigma = true;
  bool impute = true;
};

class Sampler {
 public:
  Sampler(const Eigen::MatrixXd& X_aug, std::span<const int> A, std::span<const double> Y,
          std::span<const int> delta, const BartHyperparams& hyper, std::uint64_t seed, Control control = {})
      : hyper_(hyper), control_(control), rng_(make_rng(seed)) {
    hyper_.validate();
    n_ = Y.size();
    if (static_cast<std::size_t>(X_aug.rows()) != n_ || A.size() != n_ || delta.size() != n_)
      throw std::invalid_argument("inconsistent input lengths");
    if (n_ == 0) throw std::invalid_argument("empty data");
    if (std::none_of(delta.begin(), delta.end(), [](int d) { return d == 1; }))
      throw std::invalid_argument("no observed events");

    Eigen::MatrixXd Xb(X_aug.rows(), X_aug.cols() + 1);
    Xb.leftCols(X_aug.cols()) = X_aug;
    for (std::size_t i = 0; i < n_; ++i) {
      if (A[i] != 0 && A[i] != 1) throw std::invalid_argument("treatment must be 0/1");
      Xb(static_cast<Eigen::Index>(i), X_aug.cols()) = A[i];
    }
    treat_var_ = static_cast<int>(X_aug.cols());
    grid_ = CutGrid(Xb, hyper_.num_cuts);

    std::vector<double> ly(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      ly[i] = std::log(Y[i]);
      if (!std::isfinite(ly[i])) throw std::invalid_argument("non-finite log survival time");
    }
    const auto [mn, mx] = std::minmax_element(ly.begin(), ly.end());
    center_ = 0.5 * (*mn + *mx);
    scale_ = *mx > *mn ? *mx - *mn : 1.0;
    lower_.resize(n_);
    censored_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      lower_[i] = (ly[i] - center_) / scale_;
      censored_[i] = delta[i] == 0;
    }

    sigma_hat_ = ols_sigma(Xb, lower_);
    const double chi = boost::math::quantile(boost::math::chi_squared(hyper_.nu), 1.0 - hyper_.q);
    lambda_ = sigma_hat_ * sigma_hat_ * chi / hyper_.nu;
    sigma_ = sigma_hat_;
    tau_ = 0.5 / (hyper_.k * std::sqrt(static_cast<double>(hyper_.num_trees)));

    z_ = lower_;
    for (std::size_t i = 0; i < n_; ++i)
      if (censored_[i]) z_[i] += 0.5 * sigma_hat_;
    const double mu0 = mean(z_) / static_cast<double>(hyper_.num_trees);
    trees_.assign(hyper_.num_trees, Tree(n_, mu0));
    tree_fit_.assign(hyper_.num_trees * n_, mu0);
    total_fit_.assign(n_, 0.0);
    recompute_total_fit();
    resid_.resize(n_);
  }

  /// One full Gibbs sweep: impute, backfit every tree, redraw sigma.
  void step() {
    if (control_.impute)
      for (std::size_t i = 0; i < n_; ++i)
        if (censored_[i]) z_[i] = sample_truncated_normal(total_fit_[i], sigma_, lower_[i], rng_);

    for (std::size_t j = 0; j < trees_.size(); ++j) {
      double* fit = &tree_fit_[j * n_];
      for (std::size_t i = 0; i < n_; ++i) resid_[i] = z_[i] - total_fit_[i] + fit[i];
      if (control_.update_trees) metropolis(trees_[j]);
      if (control_.update_leaves) draw_leaves(trees_[j]);
      for (int k : trees_[j].leaves()) {
        const auto& nd = trees_[j].node(k);
        for (std::size_t i : nd.obs) {
          total_fit_[i] += nd.mu - fit[i];
          fit[i] = nd.mu;
        }
      }
    }
    recompute_total_fit();

    if (control_.update_sigma) {
      double ssr = 0.0;
      for (std::size_t i = 0; i < n_; ++i) ssr += (z_[i] - total_fit_[i]) * (z_[i] - total_fit_[i]);
      std::chi_squared_distribution<double> chi(hyper_.nu + static_cast<double>(n_));
      sigma_ = std::sqrt((hyper_.nu * lambda_ + ssr) / chi(rng_));
    }
  }

  /// theta_s(x_i) = m(1, x_i) - m(0, x_i) on the original log-time scale.
  void theta(std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    for (const auto& t : trees_) {
      if (!t.splits_on(treat_var_)) continue;
      for (std::size_t i = 0; i < n_; ++i)
        out[i] += t.node(t.route(grid_, i, treat_var_, 1)).mu - t.node(t.route(grid_, i, treat_var_, 0)).mu;
    }
    for (double& v : out) v *= scale_;
  }

  /// Sum of tree predictions for row i, computed from the trees themselves.
  double sum_of_trees(std::size_t i) const {
    double s = 0.0;
    for (const auto& t : trees_) s += t.node(t.route(grid_, i)).mu;
    return s;
  }

  double fitted_log_time(std::size_t i) const { return center_ + scale_ * total_fit_[i]; }

  std::size_t size() const { return n_; }
  const std::vector<Tree>& trees() const { return trees_; }
  const std::vector<double>& total_fit() const { return total_fit_; }
  const std::vector<double>& z() const { return z_; }
  const std::vector<double>& lower() const { return lower_; }
  const std::vector<char>& censored() const { return censored_; }
  const CutGrid& grid() const { return grid_; }
  double sigma() const { return sigma_; }
  double sigma_original() const { return sigma_ * scale_; }
  double sigma_hat() const { return sigma_hat_; }
  double lambda() const { return lambda_; }
  double tau() const { return tau_; }
  double scale() const { return scale_; }
  double center() const { return center_; }
  const std::array<MoveStats, 3>& move_stats() const { return stats_; }

 private:
  enum Move { kGrow = 0, kPrune = 1, kChange = 2 };

  static double ols_sigma(const Eigen::MatrixXd& Xb, const std::vector<double>& y) {
    const Eigen::Index n = Xb.rows();
    Eigen::MatrixXd D(n, Xb.cols() + 1);
    D.col(0).setOnes();
    D.rightCols(Xb.cols()) = Xb;
    const Eigen::Map<const Eigen::VectorXd> yv(y.data(), n);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(D);
    const Eigen::Index dof = n - qr.rank();
    double s = 0.0;
    if (dof > 0) {
      const Eigen::VectorXd res = yv - D * qr.solve(yv);
      s = std::sqrt(res.squaredNorm() / static_cast<double>(dof));
    } else {
      s = std::sqrt(sample_variance(y));
    }
    return std::max(s, 1e-3);
  }

  void recompute_total_fit() {
    std::fill(total_fit_.begin(), total_fit_.end(), 0.0);
    for (std::size_t j = 0; j < trees_.size(); ++j) {
      const double* fit = &tree_fit_[j * n_];
      for (std::size_t i = 0; i < n_; ++i) total_fit_[i] += fit[i];
    }
  }

  double split_prob(int depth, bool available) const {
    return available ? hyper_.alpha * std::pow(1.0 + depth, -hyper_.beta) : 0.0;
  }

  double lm(std::size_t n, double s) const { return leaf_log_marginal(n, s, sigma_, tau_); }

  std::size_t uniform_index(std::size_t count) {
    return std::uniform_int_distribution<std::size_t>(0, count - 1)(rng_);
  }

  static std::vector<int> available_vars(const Ranges& r) {
    std::vector<int> v;
    for (std::size_t j = 0; j < r.size(); ++j)
      if (r[j].first <= r[j].second) v.push_back(static_cast<int>(j));
    return v;
  }

  static Ranges child_ranges(Ranges r, int var, int cut, bool left) {
    auto& lh = r[static_cast<std::size_t>(var)];
    if (left)
      lh.second = std::min(lh.second, cut - 1);
    else
      lh.first = std::max(lh.first, cut + 1);
    return r;
  }

  struct Partition {
    std::size_t nl = 0, nr = 0;
    double sl = 0.0, sr = 0.0;
  };

  Partition partition(const std::vector<std::size_t>& obs, int var, int cut) const {
    Partition p;
    for (std::size_t i : obs) {
      if (grid_.code(static_cast<std::size_t>(var), i) <= cut) {
        ++p.nl;
        p.sl += resid_[i];
      } else {
        ++p.nr;
        p.sr += resid_[i];
      }
    }
    return p;
  }

  std::vector<int> goodbots(const Tree& t) const {
    std::vector<int> out;
    for (int k : t.leaves())
      if (any_available(t.ranges(k, grid_))) out.push_back(k);
    return out;
  }

  bool accept(double log_ratio) { return std::log(uniform_open(rng_)) < log_ratio; }

  void metropolis(Tree& t) {
    if (uniform_open(rng_) < 0.56) {
      const auto good = goodbots(t);
      const double pb = t.is_stump() ? 1.0 : (good.empty() ? 0.0 : 0.5);
      if (uniform_open(rng_) < pb) {
        if (!good.empty()) grow(t, good, pb);
      } else {
        prune(t, good, pb);
      }
    } else {
      change(t);
    }
  }

  void grow(Tree& t, const std::vector<int>& good, double pb) {
    auto& st = stats_[kGrow];
    ++st.proposed;
    const int nx = good[uniform_index(good.size())];
    const Ranges r = t.ranges(nx, grid_);
    const auto vars = available_vars(r);
    const int v = vars[uniform_index(vars.size())];
    const auto [lo, hi] = r[static_cast<std::size_t>(v)];
    const int cut = lo + static_cast<int>(uniform_index(static_cast<std::size_t>(hi - lo + 1)));
    const auto& obs = t.node(nx).obs;
    const Partition p = partition(obs, v, cut);
    if (p.nl < hyper_.min_leaf_size || p.nr < hyper_.min_leaf_size) return;

    const int d = t.node(nx).depth;
    const bool l_avail = any_available(child_ranges(r, v, cut, true));
    const bool r_avail = any_available(child_ranges(r, v, cut, false));
    const double pg = split_prob(d, true);
    const double pgl = split_prob(d + 1, l_avail), pgr = split_prob(d + 1, r_avail);
    const std::size_t good_y = good.size() - 1 + l_avail + r_avail;
    const double pd_y = good_y > 0 ? 0.5 : 1.0;
    std::size_t nog_y = t.nogs().size() + 1;
    const int parent = t.node(nx).parent;
    if (parent >= 0) {
      const auto& pn = t.node(parent);
      if (t.node(pn.left).is_leaf() && t.node(pn.right).is_leaf()) --nog_y;
    }
    const double log_ratio = std::log(pg) + std::log1p(-pgl) + std::log1p(-pgr) + std::log(pd_y) -
                             std::log(static_cast<double>(nog_y)) - std::log1p(-pg) - std::log(pb) +
                             std::log(static_cast<double>(good.size())) + lm(p.nl, p.sl) + lm(p.nr, p.sr) -
                             lm(p.nl + p.nr, p.sl + p.sr);
    if (!accept(log_ratio)) return;
    ++st.accepted;
    t.split(nx, v, cut, grid_);
  }

  void prune(Tree& t, const std::vector<int>& good, double pb) {
    const auto nogs = t.nogs();
    if (nogs.empty()) return;
    auto& st = stats_[kPrune];
    ++st.proposed;
    const int nx = nogs[uniform_index(nogs.size())];
    const auto& nd = t.node(nx);
    const Ranges r = t.ranges(nx, grid_);
    const bool l_avail = any_available(child_ranges(r, nd.var, nd.cut, true));
    const bool r_avail = any_available(child_ranges(r, nd.var, nd.cut, false));
    const double pg = split_prob(nd.depth, true);
    const double pgl = split_prob(nd.depth + 1, l_avail), pgr = split_prob(nd.depth + 1, r_avail);
    const std::size_t good_y = good.size() - l_avail - r_avail + 1;
    const double pb_y = t.num_nodes() == 3 ? 1.0 : 0.5;
    const double pd_x = 1.0 - pb;

    const auto& L = t.node(nd.left).obs;
    const auto& R = t.node(nd.right).obs;
    const double sl = sum_over(L, resid_), sr = sum_over(R, resid_);
    const double log_ratio = std::log1p(-pg) + std::log(pb_y) - std::log(static_cast<double>(good_y)) -
                             (std::log(pg) + std::log1p(-pgl) + std::log1p(-pgr) + std::log(pd_x) -
                              std::log(static_cast<double>(nogs.size()))) +
                             lm(L.size() + R.size(), sl + sr) - lm(L.size(), sl) - lm(R.size(), sr);
    if (!accept(log_ratio)) return;
    ++st.accepted;
    t.collapse(nx);
  }

  void change(Tree& t) {
    const auto nogs = t.nogs();
    if (nogs.empty()) return;
    auto& st = stats_[kChange];
    ++st.proposed;
    const int nx = nogs[uniform_index(nogs.size())];
    const auto& nd = t.node(nx);
    const Ranges r = t.ranges(nx, grid_);
    const auto vars = available_vars(r);
    const int v = vars[uniform_index(vars.size())];
    const auto [lo, hi] = r[static_cast<std::size_t>(v)];
    const int cut = lo + static_cast<int>(uniform_index(static_cast<std::size_t>(hi - lo + 1)));

    const auto& L = t.node(nd.left).obs;
    const auto& R = t.node(nd.right).obs;
    Partition p = partition(L, v, cut);
    const Partition q = partition(R, v, cut);
    p.nl += q.nl;
    p.nr += q.nr;
    p.sl += q.sl;
    p.sr += q.sr;
    if (p.nl < hyper_.min_leaf_size || p.nr < hyper_.min_leaf_size) return;

    const int d = nd.depth;
    const auto pg_child = [&](int var, int c, bool left) {
      return split_prob(d + 1, any_available(child_ranges(r, var, c, left)));
    };
    const double log_ratio = std::log1p(-pg_child(v, cut, true)) + std::log1p(-pg_child(v, cut, false)) -
                             std::log1p(-pg_child(nd.var, nd.cut, true)) -
                             std::log1p(-pg_child(nd.var, nd.cut, false)) + lm(p.nl, p.sl) + lm(p.nr, p.sr) -
                             lm(L.size(), sum_over(L, resid_)) - lm(R.size(), sum_over(R, resid_));
    if (!accept(log_ratio)) return;
    ++st.accepted;
    t.collapse(nx);
    t.split(nx, v, cut, grid_);
  }

  void draw_leaves(Tree& t) {
    std::normal_distribution<double> z01;
    const double s2 = sigma_ * sigma_, t2 = tau_ * tau_;
    for (int k : t.leaves()) {
      const auto& obs = t.node(k).obs;
      const double prec = static_cast<double>(obs.size()) / s2 + 1.0 / t2;
      const double m = sum_over(obs, resid_) / s2 / prec;
      t.set_mu(k, m + z01(rng_) / std::sqrt(prec));
    }
  }

  BartHyperparams hyper_;
  Control control_;
  Rng rng_;
  std::size_t n_ = 0;
  int treat_var_ = 0;
  CutGrid grid_;
  double center_ = 0.0, scale_ = 1.0;
  double sigma_hat_ = 1.0, lambda_ = 1.0, sigma_ = 1.0, tau_ = 1.0;
  std::vector<double> lower_, z_, total_fit_, tree_fit_, resid_;
  std::vector<char> censored_;
  std::vector<Tree> trees_;
  std::array<MoveStats, 3> stats_{};
};

}  // namespace bart

struct BartPosterior {
  std::size_t n = 0;
  std::size_t S = 0;
  std::vector<double> theta_draws;  // row-major n x S
  std::vector<double> sigma_draws;
  double grow_acceptance = 0.0;
  double prune_acceptance = 0.0;
  double change_acceptance = 0.0;

  double theta(std::size_t i, std::size_t s) const { return theta_draws[i * S + s]; }
  std::span<const double> draws_of(std::size_t i) const { return {theta_draws.data() + i * S, S}; }

  std::vector<double> posterior_mean() const {
    std::vector<double> m(n);
    for (std::size_t i = 0; i < n; ++i) m[i] = mean(draws_of(i));
    return m;
  }
};

/// Runs the chain and keeps theta draws after burn-in.
inline BartPosterior fit_bart(const Eigen::MatrixXd& X_aug, std::span<const int> A, std::span<const double> Y,
                              std::span<const int> delta, const BartHyperparams& hyper, std::uint64_t seed) {
  bart::Sampler sampler(X_aug, A, Y, delta, hyper, seed);
  BartPosterior post;
  post.n = Y.size();
  post.S = hyper.retained();
  post.theta_draws.assign(post.n * post.S, 0.0);
  post.sigma_draws.reserve(post.S);
  std::vector<double> th(post.n);
  std::size_t s = 0;
  for (std::size_t it = 0; it < hyper.iterations; ++it) {
    sampler.step();
    if (it < hyper.burn_in || (it - hyper.burn_in) % hyper.thin != 0) continue;
    sampler.theta(th);
    for (std::size_t i = 0; i < post.n; ++i) post.theta_draws[i * post.S + s] = th[i];
    post.sigma_draws.push_back(sampler.sigma_original());
    ++s;
  }
  const auto& st = sampler.move_stats();
  post.grow_acceptance = st[0].rate();
  post.prune_acceptance = st[1].rate();
  post.change_acceptance = st[2].rate();
  return post;
}

inline std::vector<Interval> credible_interval(const BartPosterior& post, double level = 0.95) {
  if (post.S < 100) throw std::invalid_argument("credible intervals need at least 100 draws");
  std::vector<Interval> out(post.n);
  std::vector<double> buf(post.S);
  for (std::size_t i = 0; i < post.n; ++i) {
    const auto d = post.draws_of(i);
    buf.assign(d.begin(), d.end());
    std::sort(buf.begin(), buf.end());
    out[i] = {quantile_sorted(buf, 0.5 * (1.0 - level)), quantile_sorted(buf, 0.5 * (1.0 + level))};
  }
  return out;
}

/// D_i: posterior probability that individual i's effect is at least the
/// within-draw average effect; ties count one half.
inline std::vector<double> posterior_d_statistics(const BartPosterior& post) {
  if (post.S < 100) throw std::invalid_argument("D statistics need at least 100 draws");
  std::vector<double> d(post.n, 0.0), col(post.n);
  for (std::size_t s = 0; s < post.S; ++s) {
    for (std::size_t i = 0; i < post.n; ++i) col[i] = post.theta(i, s);
    const double avg = mean(col);
    const double tol = 1e-12 * (1.0 + std::abs(avg));
    for (std::size_t i = 0; i < post.n; ++i) {
      if (std::abs(col[i] - avg) <= tol)
        d[i] += 0.5;
      else if (col[i] > avg)
        d[i] += 1.0;
    }
  }
  for (double& v : d) v /= static_cast<double>(post.S);
  return d;
}

inline bool d_flagged(double d) { return d <= 0.025 || d >= 0.975; }

inline double null_flags_bart(const BartPosterior& post) {
  const auto d = posterior_d_statistics(post);
  return static_cast<double>(std::count_if(d.begin(), d.end(), d_flagged)) / static_cast<double>(d.size());
}

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(v >> (8 * k));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("truncated posterior file");
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k) v |= static_cast<std::uint64_t>(b[k]) << (8 * k);
  return v;
}

}  // namespace detail

/// Binary dump: "BARTPOST", n and S as little-endian uint64, then the n x S
/// theta draws row-major as little-endian IEEE doubles.
inline void write_posterior(const BartPosterior& post, std::ostream& os) {
  os.write("BARTPOST", 8);
  detail::put_u64(os, post.n);
  detail::put_u64(os, post.S);
  for (double v : post.theta_draws) detail::put_u64(os, std::bit_cast<std::uint64_t>(v));
}

inline BartPosterior read_posterior(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, "BARTPOST", 8) != 0) throw std::runtime_error("not a BARTPOST file");
  BartPosterior post;
  post.n = detail::get_u64(is);
  post.S = detail::get_u64(is);
  post.theta_draws.resize(post.n * post.S);
  for (double& v : post.theta_draws) v = std::bit_cast<double>(detail::get_u64(is));
  return post;
}

}  // namespace survhte
