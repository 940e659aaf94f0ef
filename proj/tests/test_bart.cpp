#include <gtest/gtest.h>

#include <boost/math/distributions/normal.hpp>

#include <sstream>

#include "survhte/bart.hpp"

using namespace survhte;

namespace {

struct AftData {
  Eigen::MatrixXd X;
  std::vector<int> A;
  std::vector<double> Y;
  std::vector<int> delta;
};

// log T = 1 + 0.5 x1 + 0.8 A + N(0, 0.3^2), optional exponential censoring.
AftData linear_aft(std::size_t n, double censor_rate, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> z;
  AftData d{Eigen::MatrixXd(static_cast<Eigen::Index>(n), 2), std::vector<int>(n), std::vector<double>(n),
            std::vector<int>(n, 1)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    d.X(r, 0) = z(rng);
    d.X(r, 1) = uniform_open(rng);
    d.A[i] = uniform_open(rng) < 0.5;
    const double t = std::exp(1.0 + 0.5 * d.X(r, 0) + 0.8 * d.A[i] + 0.3 * z(rng));
    if (censor_rate > 0.0) {
      const double c = std::exponential_distribution<double>(censor_rate)(rng);
      d.Y[i] = std::min(t, c);
      d.delta[i] = t <= c;
    } else {
      d.Y[i] = t;
    }
  }
  return d;
}

BartHyperparams short_run(std::size_t trees, std::size_t iters, std::size_t burn) {
  BartHyperparams h;
  h.num_trees = trees;
  h.iterations = iters;
  h.burn_in = burn;
  return h;
}

}  // namespace

TEST(TruncatedNormal, HalfNormalMean) {
  Rng rng = make_rng(1);
  double s = 0.0;
  const int n = 1000000;
  for (int i = 0; i < n; ++i) s += sample_truncated_normal(0.0, 1.0, 0.0, rng);
  EXPECT_NEAR(s / n, std::sqrt(2.0 / M_PI), 0.003);
}

TEST(TruncatedNormal, UntruncatedMatchesNormalKs) {
  Rng rng = make_rng(2);
  std::vector<double> x(100000);
  for (double& v : x) v = sample_truncated_normal(1.0, 2.0, -std::numeric_limits<double>::infinity(), rng);
  std::sort(x.begin(), x.end());
  boost::math::normal law(1.0, 2.0);
  double dmax = 0.0;
  const double n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = boost::math::cdf(law, x[i]);
    dmax = std::max({dmax, std::abs(f - i / n), std::abs((i + 1) / n - f)});
  }
  EXPECT_LT(dmax * std::sqrt(n), 1.628);
}

TEST(TruncatedNormal, SupportAndFarTail) {
  Rng rng = make_rng(3);
  for (double lower : {-3.0, 0.5, 3.9, 4.1, 8.0, 30.0}) {
    double s = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
      const double v = sample_truncated_normal(0.0, 1.0, lower, rng);
      ASSERT_GT(v, lower);
      s += v;
    }
    const double phi = std::exp(-0.5 * lower * lower) / std::sqrt(2 * M_PI);
    const double tail = 0.5 * std::erfc(lower / std::sqrt(2.0));
    if (lower < 20) {
      EXPECT_NEAR(s / n, phi / tail, 0.01) << lower;
    }
  }
  EXPECT_GT(sample_truncated_normal(2.0, 0.5, 7.0, std::uint64_t{9}), 7.0);
}

TEST(BartTree, GrowThenPruneRestoresState) {
  Eigen::MatrixXd X(40, 2);
  std::vector<double> r(40);
  Rng rng = make_rng(4);
  for (int i = 0; i < 40; ++i) {
    X(i, 0) = uniform_open(rng);
    X(i, 1) = i % 3;
    r[static_cast<std::size_t>(i)] = std::normal_distribution<double>()(rng);
  }
  const bart::CutGrid grid(X, 10);
  bart::Tree t(40, 0.0);
  t.split(0, 0, 4, grid);
  const int leaf = t.node(0).right;
  const bart::Tree before = t;
  const double ll = bart::tree_log_likelihood(t, r, 0.7, 0.1);

  t.split(leaf, 1, 0, grid);
  EXPECT_NE(bart::tree_log_likelihood(t, r, 0.7, 0.1), ll);
  t.collapse(leaf);
  EXPECT_TRUE(t.same_structure(before));
  EXPECT_EQ(bart::tree_log_likelihood(t, r, 0.7, 0.1), ll);
}

TEST(BartTree, RangesNarrowDownThePath) {
  Eigen::MatrixXd X(50, 1);
  for (int i = 0; i < 50; ++i) X(i, 0) = i;
  const bart::CutGrid grid(X, 100);
  ASSERT_EQ(grid.num_cuts(0), 49);
  bart::Tree t(50, 0.0);
  t.split(0, 0, 20, grid);
  t.split(t.node(0).left, 0, 5, grid);
  const int ll = t.node(t.node(0).left).left, lr = t.node(t.node(0).left).right;
  EXPECT_EQ(t.ranges(ll, grid)[0], std::make_pair(0, 4));
  EXPECT_EQ(t.ranges(lr, grid)[0], std::make_pair(6, 19));
  EXPECT_EQ(t.ranges(t.node(0).right, grid)[0], std::make_pair(21, 48));
  EXPECT_EQ(t.node(ll).obs.size(), 6u);
  for (std::size_t i : t.node(lr).obs) EXPECT_EQ(t.route(grid, i), lr);
}

TEST(BartSampler, LeafFullConditional) {
  auto d = linear_aft(60, 0.0, 5);
  for (double& y : d.Y) y = std::exp(std::pow(std::log(y) + 2.0, 2.0) / 4.0);  // skew so the mean is off centre
  bart::Control ctl;
  ctl.update_trees = false;
  ctl.update_sigma = false;
  bart::Sampler s(d.X, d.A, d.Y, d.delta, short_run(1, 2, 1), 6, ctl);
  const double s2 = s.sigma() * s.sigma(), t2 = s.tau() * s.tau();
  const double prec = 60.0 / s2 + 1.0 / t2;
  const double post_mean = mean(s.z()) * 60.0 / s2 / prec;
  const double post_var = 1.0 / prec;
  std::vector<double> mu(100000);
  for (double& m : mu) {
    s.step();
    m = s.trees()[0].node(0).mu;
  }
  ASSERT_GT(std::abs(post_mean), 0.02);
  EXPECT_NEAR(mean(mu), post_mean, 0.01 * std::abs(post_mean));
  EXPECT_NEAR(sample_variance(mu), post_var, 0.01 * post_var);
}

TEST(BartSampler, SigmaFullConditional) {
  const auto d = linear_aft(200, 0.0, 7);
  bart::Control ctl;
  ctl.update_trees = false;
  ctl.update_leaves = false;
  bart::Sampler s(d.X, d.A, d.Y, d.delta, short_run(1, 2, 1), 8, ctl);
  double ssr = 0.0;
  for (std::size_t i = 0; i < 200; ++i) ssr += std::pow(s.z()[i] - s.total_fit()[i], 2);
  const double expected = (3.0 * s.lambda() + ssr) / (3.0 + 200 - 2);
  std::vector<double> s2(100000);
  for (double& v : s2) {
    s.step();
    v = s.sigma() * s.sigma();
  }
  EXPECT_NEAR(mean(s2), expected, 0.01 * expected);
}

TEST(BartSampler, SumOfTreesAndImputationInvariants) {
  const auto d = linear_aft(300, 0.1, 9);
  ASSERT_GT(std::count(d.delta.begin(), d.delta.end(), 0), 20);
  bart::Sampler s(d.X, d.A, d.Y, d.delta, short_run(50, 100, 10), 10);
  for (int it = 0; it < 100; ++it) {
    s.step();
    for (std::size_t i = 0; i < 300; ++i) {
      ASSERT_EQ(s.total_fit()[i], s.sum_of_trees(i));
      if (s.censored()[i]) {
        ASSERT_GT(s.z()[i], s.lower()[i]);
      }
    }
  }
  for (const auto& t : s.trees())
    for (int k : t.leaves()) EXPECT_GE(t.node(k).obs.size(), 1u);
}

TEST(BartSampler, Errors) {
  auto d = linear_aft(30, 0.0, 11);
  std::vector<int> none(30, 0);
  try {
    bart::Sampler(d.X, d.A, d.Y, none, short_run(5, 10, 1), 1);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_STREQ(e.what(), "no observed events");
  }
  d.Y[3] = 0.0;
  EXPECT_THROW(bart::Sampler(d.X, d.A, d.Y, d.delta, short_run(5, 10, 1), 1), std::invalid_argument);
  BartHyperparams bad;
  bad.burn_in = bad.iterations;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Bart, ConstantOutcomeRecovered) {
  auto d = linear_aft(200, 0.0, 12);
  std::fill(d.Y.begin(), d.Y.end(), std::exp(3.0));
  bart::Sampler s(d.X, d.A, d.Y, d.delta, short_run(50, 300, 100), 13);
  for (int it = 0; it < 300; ++it) s.step();
  for (std::size_t i = 0; i < 200; ++i) EXPECT_NEAR(s.fitted_log_time(i), 3.0, 0.02);
  EXPECT_LT(s.sigma_original(), 0.01);
}

TEST(Bart, LinearEffectRecovered) {
  const auto d = linear_aft(1000, 0.0, 14);
  const auto post = fit_bart(d.X, d.A, d.Y, d.delta, short_run(200, 1200, 300), 15);
  ASSERT_EQ(post.S, 900u);
  const auto m = post.posterior_mean();
  EXPECT_NEAR(mean(m), 0.8, 0.15);
  const auto ci = credible_interval(post);
  int covered = 0;
  for (const auto& c : ci) covered += c.lo <= 0.8 && 0.8 <= c.hi;
  EXPECT_GE(covered, 850);
  for (double s : post.sigma_draws) EXPECT_GT(s, 0.0);
}

TEST(Bart, DeterministicAndSeedStable) {
  const auto d = linear_aft(200, 0.2, 16);
  const auto h = short_run(40, 400, 100);
  const auto a = fit_bart(d.X, d.A, d.Y, d.delta, h, 17);
  const auto b = fit_bart(d.X, d.A, d.Y, d.delta, h, 17);
  const auto c = fit_bart(d.X, d.A, d.Y, d.delta, h, 18);
  EXPECT_EQ(a.theta_draws, b.theta_draws);
  EXPECT_EQ(a.sigma_draws, b.sigma_draws);
  EXPECT_NE(a.theta_draws, c.theta_draws);
  EXPECT_NEAR(a.grow_acceptance, c.grow_acceptance, 0.1);
  EXPECT_NEAR(a.prune_acceptance, c.prune_acceptance, 0.1);
  EXPECT_NEAR(a.change_acceptance, c.change_acceptance, 0.1);
}

TEST(BartPosterior, CredibleIntervalQuantiles) {
  BartPosterior p;
  p.n = 2;
  p.S = 1000;
  p.theta_draws.resize(2000);
  for (std::size_t s = 0; s < 1000; ++s) {
    p.theta_draws[s] = 0.01 * static_cast<double>(s + 1);
    p.theta_draws[1000 + s] = 4.5;
  }
  const auto ci = credible_interval(p);
  // type 7: h = 999 * 0.025 = 24.975 -> 25 + 0.975 * (26 - 25)
  EXPECT_NEAR(ci[0].lo, 0.25975, 1e-12);
  EXPECT_NEAR(ci[0].hi, 9.75025, 1e-12);
  EXPECT_EQ(ci[1].lo, 4.5);
  EXPECT_EQ(ci[1].hi, 4.5);
  const double m = p.posterior_mean()[0];
  EXPECT_LE(ci[0].lo, m);
  EXPECT_LE(m, ci[0].hi);
  p.S = 99;
  EXPECT_THROW(credible_interval(p), std::invalid_argument);
}

TEST(BartPosterior, DStatistics) {
  BartPosterior p;
  p.n = 3;
  p.S = 200;
  p.theta_draws.resize(600);
  Rng rng = make_rng(19);
  for (std::size_t s = 0; s < 200; ++s) {
    const double e = std::normal_distribution<double>()(rng);
    p.theta_draws[s] = 1.0 + e;
    p.theta_draws[200 + s] = 1.0 - e;
    p.theta_draws[400 + s] = 1.0;
  }
  // Individuals 1 and 2 are symmetric about 1 and draw 3 sits on the mean.
  auto d = posterior_d_statistics(p);
  EXPECT_NEAR(d[0] + d[1], 1.0, 1e-12);
  EXPECT_EQ(d[2], 0.5);

  for (std::size_t s = 0; s < 200; ++s) {
    p.theta_draws[s] = 2.0;
    p.theta_draws[200 + s] = 0.0;
  }
  d = posterior_d_statistics(p);
  EXPECT_EQ(d[0], 1.0);
  EXPECT_EQ(d[1], 0.0);

  std::fill(p.theta_draws.begin(), p.theta_draws.end(), 0.3);
  for (double v : posterior_d_statistics(p)) EXPECT_EQ(v, 0.5);
  EXPECT_EQ(null_flags_bart(p), 0.0);
}

TEST(BartPosterior, BinaryDumpRoundTrip) {
  BartPosterior p;
  p.n = 2;
  p.S = 3;
  p.theta_draws = {0.1, -2.5, 1e300, 3.0, -0.0, 7.25};
  std::stringstream ss;
  write_posterior(p, ss);
  const std::string bytes = ss.str();
  ASSERT_EQ(bytes.size(), 8u + 16u + 48u);
  EXPECT_EQ(bytes.substr(0, 8), "BARTPOST");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 3);
  const auto q = read_posterior(ss);
  EXPECT_EQ(q.n, 2u);
  EXPECT_EQ(q.S, 3u);
  EXPECT_EQ(q.theta_draws, p.theta_draws);
}
