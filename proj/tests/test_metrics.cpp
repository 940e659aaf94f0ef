#include <gtest/gtest.h>

#include "survhte/metrics.hpp"

using namespace survhte;

namespace {

BartPosterior point_mass(std::span<const double> values, std::size_t S = 100) {
  BartPosterior post;
  post.n = values.size();
  post.S = S;
  for (double v : values) post.theta_draws.insert(post.theta_draws.end(), S, v);
  return post;
}

// Draws for one individual with `negative` of 100 draws below zero.
BartPosterior split_draws(std::size_t negative, double magnitude = 1.0) {
  BartPosterior post;
  post.n = 1;
  post.S = 100;
  for (std::size_t s = 0; s < 100; ++s) post.theta_draws.push_back(s < negative ? -magnitude : magnitude);
  return post;
}

}  // namespace

TEST(BiasRmse, Fixtures) {
  const std::vector<double> theta{0.1, -0.4, 2.0};
  auto r = bias_rmse(theta, theta);
  EXPECT_EQ(r.bias, 0.0);
  EXPECT_EQ(r.rmse, 0.0);

  // Powers of two keep the shifted values exact.
  const std::vector<double> base{0.5, -0.25, 2.0, 1.0};
  std::vector<double> shifted = base;
  for (double& v : shifted) v += 0.3;
  r = bias_rmse(shifted, base);
  EXPECT_NEAR(r.bias, 0.3, 1e-15);
  EXPECT_NEAR(r.rmse, 0.3, 1e-15);

  const std::vector<double> hat{1.0, -1.0}, zero{0.0, 0.0};
  r = bias_rmse(hat, zero);
  EXPECT_EQ(r.bias, 0.0);
  EXPECT_EQ(r.rmse, 1.0);

  EXPECT_THROW(bias_rmse(std::vector<double>{}, std::vector<double>{}), std::invalid_argument);
}

TEST(Misclassification, BartFixtures) {
  const std::vector<double> pos{0.5}, neg{-0.2};
  EXPECT_EQ(misclass_bart(split_draws(60), pos), 1.0);
  EXPECT_EQ(misclass_bart(split_draws(90), neg), 0.0);
  EXPECT_EQ(misclass_bart(split_draws(50), pos), 0.0);  // exactly half is not "exceeds"

  const std::vector<double> truth{0.0, 0.4, -0.3};
  const std::vector<double> est{-1.0, -1.0, -1.0};
  EXPECT_EQ(misclass_bart(point_mass(est), truth), 0.5);
  EXPECT_THROW(misclass_bart(point_mass(est), std::vector<double>{0.0, 0.0, 0.0}), std::invalid_argument);
  EXPECT_THROW(misclass_bart(point_mass(pos, 50), pos), std::invalid_argument);
}

TEST(Misclassification, CsfFixtures) {
  EXPECT_EQ(misclass_csf(std::vector<double>{-0.1}, std::vector<double>{0.2}), 1.0);
  const std::vector<double> theta{0.3, -0.2, 1.5, -4.0};
  EXPECT_EQ(misclass_csf(theta, theta), 0.0);
  std::vector<double> flipped = theta;
  for (double& v : flipped) v = -v;
  EXPECT_EQ(misclass_csf(flipped, theta), 1.0);
  EXPECT_EQ(misclass_csf(std::vector<double>{5.0, 1.0}, std::vector<double>{0.0, -1.0}), 1.0);
  EXPECT_THROW(misclass_csf(theta, std::vector<double>(4, 0.0)), std::invalid_argument);
}

TEST(HosmerLemeshow, PerfectCalibrationIsZero) {
  std::vector<double> theta(100);
  for (std::size_t i = 0; i < 100; ++i) theta[i] = std::sin(static_cast<double>(i));
  EXPECT_EQ(hosmer_lemeshow(theta, theta), 0.0);
}

TEST(HosmerLemeshow, HandComputedFixture) {
  // theta = 0..99; decile g gets offset c_g = 0.1 g and alternating +-0.2, so
  // each group has gap mean c_g and sample variance 10 * 0.04 / 9.
  std::vector<double> theta(100), hat(100);
  for (std::size_t i = 0; i < 100; ++i) {
    theta[i] = static_cast<double>(i);
    const double c = 0.1 * static_cast<double>(i / 10);
    hat[i] = theta[i] + c + (i % 2 == 0 ? 0.2 : -0.2);
  }
  double expected = 0.0;
  for (int g = 0; g < 10; ++g) expected += 10.0 * (0.1 * g) * (0.1 * g) / (0.4 / 9.0);
  EXPECT_NEAR(hosmer_lemeshow(hat, theta), expected, 1e-9 * expected);
}

TEST(HosmerLemeshow, InvariantToWithinDecilePermutation) {
  Rng rng = make_rng(1);
  std::normal_distribution<double> z(0.0, 1.0);
  std::vector<double> theta(200), hat(200);
  for (std::size_t i = 0; i < 200; ++i) {
    theta[i] = z(rng);
    hat[i] = 0.8 * theta[i] + 0.3 * z(rng);
  }
  const double base = hosmer_lemeshow(hat, theta);
  const auto group = calibration_groups(hat);
  std::vector<std::size_t> order(200);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<double> h2(200), t2(200);
  for (std::size_t i = 0; i < 200; ++i) {
    h2[i] = hat[order[i]];
    t2[i] = theta[order[i]];
  }
  EXPECT_EQ(hosmer_lemeshow(h2, t2), base);
  const auto g2 = calibration_groups(h2);
  for (std::size_t i = 0; i < 200; ++i) EXPECT_EQ(g2[i], group[order[i]]);
}

TEST(HosmerLemeshow, TiesAndDistinctValues) {
  std::vector<double> hat(60), theta(60, 0.0);
  for (std::size_t i = 0; i < 60; ++i) hat[i] = static_cast<double>(i % 3);
  const auto g = calibration_groups(hat);
  for (std::size_t i = 0; i < 60; ++i) EXPECT_EQ(g[i], i % 3);
  EXPECT_GE(hosmer_lemeshow(hat, theta), 0.0);
  EXPECT_THROW(hosmer_lemeshow(std::vector<double>(60, 1.0), theta), std::invalid_argument);
  EXPECT_THROW(hosmer_lemeshow(std::vector<double>(49, 1.0), std::vector<double>(49, 0.0)), std::invalid_argument);

  // A tie straddling a decile boundary joins the lower group.
  std::vector<double> h(100);
  for (std::size_t i = 0; i < 100; ++i) h[i] = static_cast<double>(i);
  h[10] = h[11] = 9.0;
  const auto gt = calibration_groups(h);
  EXPECT_EQ(gt[9], 0u);
  EXPECT_EQ(gt[10], 0u);
  EXPECT_EQ(gt[11], 0u);
  EXPECT_EQ(gt[12], 1u);
}

TEST(Coverage, Fixtures) {
  const std::vector<double> theta{-3.0, 0.0, 7.5};
  const std::vector<Interval> wide(3, Interval{-1e300, 1e300});
  EXPECT_EQ(coverage(wide, theta), 1.0);
  const std::vector<Interval> unit{{0.0, 1.0}};
  EXPECT_EQ(coverage(unit, std::vector<double>{0.5}), 1.0);
  EXPECT_EQ(coverage(unit, std::vector<double>{1.0}), 1.0);
  EXPECT_EQ(coverage(unit, std::vector<double>{1.5}), 0.0);
  EXPECT_EQ(coverage(std::vector<Interval>{{0.25, 0.25}}, std::vector<double>{0.25}), 1.0);
  EXPECT_THROW(coverage(std::vector<Interval>{{1.0, 0.0}}, std::vector<double>{0.5}), std::invalid_argument);
}

TEST(NullFlags, CsfFixtures) {
  CsfEstimate est;
  for (int i = 0; i < 8; ++i) {
    est.theta_hat.push_back(0.4);
    est.se.push_back(0.1);
    est.ci.push_back({0.4 - 0.196, 0.4 + 0.196});
  }
  EXPECT_EQ(null_flags_csf(est), 0.0);
  // Mean of theta_hat is 0.5 after the shift; the shifted CI sits above it.
  est.theta_hat[3] = 1.2;
  est.ci[3] = {1.0, 1.4};
  for (auto& c : est.ci) {
    if (&c == &est.ci[3]) continue;
    c = {0.3, 0.7};
  }
  EXPECT_EQ(null_flags_csf(est), 1.0 / 8.0);
}

TEST(MetricsProperties, RandomizedCases) {
  Rng rng = make_rng(42);
  std::normal_distribution<double> z(0.0, 1.0);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 50 + static_cast<std::size_t>(uniform_open(rng) * 150);
    std::vector<double> theta(n), hat(n);
    std::vector<Interval> ci(n), wider(n);
    const double shift = z(rng), scale = std::exp(z(rng));
    for (std::size_t i = 0; i < n; ++i) {
      theta[i] = z(rng);
      hat[i] = theta[i] + shift + scale * z(rng);
      const double half = std::abs(z(rng)) * scale;
      ci[i] = {hat[i] - half, hat[i] + half};
      const double extra = std::abs(z(rng));
      wider[i] = {ci[i].lo - extra * uniform_open(rng), ci[i].hi + extra * uniform_open(rng)};
    }
    const auto br = bias_rmse(hat, theta);
    ASSERT_GE(br.rmse * (1.0 + 1e-12), std::abs(br.bias));
    const double c = coverage(ci, theta), cw = coverage(wider, theta);
    ASSERT_GE(cw, c);
    ASSERT_GE(c, 0.0);
    ASSERT_LE(cw, 1.0);
    const double m = misclass_csf(hat, theta);
    ASSERT_GE(m, 0.0);
    ASSERT_LE(m, 1.0);
    ASSERT_EQ(misclass_bart(point_mass(hat), theta), m);
    ASSERT_GE(hosmer_lemeshow(hat, theta), 0.0);
    CsfEstimate est{hat, std::vector<double>(n, 1.0), ci};
    const double f = null_flags_csf(est);
    ASSERT_GE(f, 0.0);
    ASSERT_LE(f, 1.0);
  }
}
