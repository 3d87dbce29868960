#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "mnarjm/pooling_stats.hpp"

using namespace mnarjm;

TEST(RubinPool, TwoImputationHandExample) {
  const auto r = rubin_pool({1.0, 3.0}, {1.0, 1.0});
  EXPECT_DOUBLE_EQ(r.q_bar, 2.0);
  EXPECT_DOUBLE_EQ(r.u_bar, 1.0);
  EXPECT_DOUBLE_EQ(r.b, 2.0);
  EXPECT_DOUBLE_EQ(r.t, 4.0);
  EXPECT_DOUBLE_EQ(r.lambda, 0.75);
  EXPECT_NEAR(r.df, 1.0 / (0.75 * 0.75), 1e-12);
  EXPECT_EQ(r.m, 2);
  EXPECT_NEAR(r.se(), 2.0, 1e-15);
}

TEST(RubinPool, IdenticalEstimatesHaveNoBetweenVariance) {
  const auto r = rubin_pool({0.7, 0.7, 0.7, 0.7}, {0.04, 0.04, 0.04, 0.04});
  EXPECT_DOUBLE_EQ(r.b, 0.0);
  EXPECT_DOUBLE_EQ(r.lambda, 0.0);
  EXPECT_DOUBLE_EQ(r.t, 0.04);
  EXPECT_TRUE(std::isinf(r.df));
  EXPECT_NEAR(r.ci_high - r.q_bar, 1.959963984540054 * 0.2, 1e-12);
}

TEST(RubinPool, LambdaZeroExactlyWhenBetweenVarianceZero) {
  std::mt19937_64 g(3);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> q(5), u(5, 0.1);
    for (auto& v : q) v = n(g);
    const auto r = rubin_pool(q, u);
    EXPECT_GT(r.b, 0.0);
    EXPECT_GT(r.lambda, 0.0);
    EXPECT_LT(r.lambda, 1.0);
  }
}

TEST(RubinPool, InvariantToInputOrder) {
  std::vector<double> q = {0.31, 1.7, -0.2, 0.95, 1.12, 0.48, 2.2, 0.01, 1.5, 0.77};
  std::vector<double> u = {0.1, 0.2, 0.15, 0.11, 0.13, 0.3, 0.12, 0.09, 0.14, 0.16};
  const auto ref = rubin_pool(q, u);
  std::vector<int> idx(q.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 g(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(idx.begin(), idx.end(), g);
    std::vector<double> qp, up;
    for (int i : idx) qp.push_back(q[i]), up.push_back(u[i]);
    const auto r = rubin_pool(qp, up);
    EXPECT_EQ(r.q_bar, ref.q_bar);
    EXPECT_EQ(r.t, ref.t);
    EXPECT_EQ(r.df, ref.df);
    EXPECT_EQ(r.ci_low, ref.ci_low);
  }
}

TEST(RubinPool, IntervalWidensWithBetweenVariance) {
  double last = 0.0;
  for (double spread : {0.0, 0.05, 0.1, 0.2, 0.4, 0.8}) {
    const auto r = rubin_pool({1.0 - spread, 1.0, 1.0 + spread}, {0.05, 0.05, 0.05});
    const double width = r.ci_high - r.ci_low;
    EXPECT_GT(width, last);
    last = width;
  }
}

TEST(RubinPool, SmallSampleDegreesOfFreedom) {
  const auto big = rubin_pool({1.0, 3.0}, {1.0, 1.0});
  const auto small = rubin_pool({1.0, 3.0}, {1.0, 1.0}, 0.95, 10.0);
  const double obs = 11.0 / 13.0 * 10.0 * 0.25;
  const double old = 1.0 / (0.75 * 0.75);
  EXPECT_NEAR(small.df, old * obs / (old + obs), 1e-12);
  EXPECT_LT(small.df, big.df);
}

TEST(RubinPool, RejectsBadInput) {
  EXPECT_THROW(rubin_pool({1.0}, {1.0}), ConfigError);
  EXPECT_THROW(rubin_pool({1.0, 2.0}, {1.0}), ConfigError);
  EXPECT_THROW(rubin_pool({1.0, 2.0}, {1.0, -0.1}), DomainError);
  EXPECT_THROW(wald_estimate(1.0, -1.0), DomainError);
}

TEST(WaldEstimate, NormalInterval) {
  const auto r = wald_estimate(1.4, 0.1);
  EXPECT_NEAR(r.ci_low, 1.4 - 0.1959963984540054, 1e-12);
  EXPECT_NEAR(r.ci_high, 1.4 + 0.1959963984540054, 1e-12);
  EXPECT_EQ(r.m, 1);
}

TEST(CriticalValue, MatchesTables) {
  EXPECT_NEAR(t_critical(std::numeric_limits<double>::infinity(), 0.95), 1.959963984540054, 1e-12);
  EXPECT_NEAR(t_critical(10.0, 0.95), 2.228138851986274, 1e-9);
  EXPECT_NEAR(t_critical(1.0, 0.95), 12.70620473617471, 1e-8);
}

TEST(Wilson, KnownValues) {
  const auto w = wilson_interval(95, 100);
  EXPECT_NEAR(w.low, 0.88818, 1e-4);
  EXPECT_NEAR(w.high, 0.97846, 1e-4);
  const auto z = wilson_interval(0, 400);
  EXPECT_NEAR(z.low, 0.0, 1e-15);
  EXPECT_GT(z.high, 0.0);
  EXPECT_LT(z.high, 0.01);
}

namespace {
EstimateRecord rec(double est, double se, double lo, double hi) {
  EstimateRecord r;
  r.estimate = est;
  r.se = se;
  r.ci_low = lo;
  r.ci_high = hi;
  return r;
}
}  // namespace

TEST(Metrics, ExactSmallCase) {
  std::vector<EstimateRecord> rs = {rec(1.2, 0.1, 1.0, 1.4), rec(1.4, 0.1, 1.2, 1.6), rec(1.6, 0.1, 1.45, 1.8),
                                    rec(1.0, 0.5, 0.1, 1.9)};
  const auto m = compute_metrics(rs, 1.4);
  EXPECT_NEAR(m.mean_estimate, 1.3, 1e-12);
  EXPECT_NEAR(m.bias, -0.1, 1e-12);
  EXPECT_NEAR(*m.percent_bias, -100.0 * 0.1 / 1.4, 1e-10);
  EXPECT_NEAR(m.rmse, std::sqrt((0.04 + 0.0 + 0.04 + 0.16) / 4.0), 1e-12);
  EXPECT_NEAR(m.empirical_variance, (0.01 + 0.01 + 0.09 + 0.09) / 3.0, 1e-12);
  EXPECT_DOUBLE_EQ(m.coverage, 0.75);
  EXPECT_EQ(m.rejections, 4);  // |1.0 / 0.5| = 2 > 1.96 too
  EXPECT_DOUBLE_EQ(m.type1_rate, 1.0);
  EXPECT_FALSE(m.mean_lambda.has_value());
}

TEST(Metrics, PercentBiasOfAttenuatedMean) {
  std::vector<EstimateRecord> rs(10, rec(1.19, 0.1, 1.0, 1.38));
  const auto m = compute_metrics(rs, 1.4);
  EXPECT_NEAR(*m.percent_bias, -15.0, 1e-10);
  EXPECT_DOUBLE_EQ(m.coverage, 0.0);
}

TEST(Metrics, SingleReplication) {
  const auto m = compute_metrics({rec(1.5, 0.2, 1.1, 1.9)}, 1.4);
  EXPECT_NEAR(m.rmse, 0.1, 1e-12);
  EXPECT_EQ(m.empirical_variance, 0.0);
}

TEST(Metrics, ZeroTruthReportsAbsoluteBias) {
  const auto m = compute_metrics({rec(0.1, 0.2, -0.3, 0.5), rec(-0.05, 0.2, -0.45, 0.35)}, 0.0);
  EXPECT_FALSE(m.percent_bias.has_value());
  EXPECT_NEAR(m.bias, 0.025, 1e-12);
  EXPECT_EQ(m.rejections, 0);
}

TEST(Metrics, LambdaSummary) {
  auto a = rec(1.0, 0.1, 0.8, 1.2), b = rec(1.0, 0.1, 0.8, 1.2);
  a.lambda = 0.2;
  b.lambda = 0.4;
  const auto m = compute_metrics({a, b}, 1.0);
  EXPECT_NEAR(*m.mean_lambda, 0.3, 1e-12);
  EXPECT_NEAR(*m.sd_lambda, std::sqrt(0.02), 1e-12);
  EXPECT_THROW(compute_metrics({}, 1.0), ConfigError);
}

TEST(HazardRatio, PerUnitAndPerTenPercent) {
  EXPECT_NEAR(std::exp(3.409 * std::log(1.1)), 1.38, 0.005);
  EXPECT_NEAR(std::exp(1.4 * std::log(1.1)), 1.1426, 1e-3);
}
