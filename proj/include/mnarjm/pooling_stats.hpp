#pragma once

// Rubin's rules for a scalar estimand and Monte Carlo summary metrics.

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <vector>

#include "mnarjm/errors.hpp"

namespace mnarjm {

/// Two-sided critical value; df = +inf gives the normal quantile.
inline double t_critical(double df, double level) {
  const double p = 0.5 * (1.0 + level);
  if (!std::isfinite(df)) return boost::math::quantile(boost::math::normal_distribution<double>(), p);
  return boost::math::quantile(boost::math::students_t_distribution<double>(df), p);
}

struct PooledEstimate {
  double q_bar = 0.0;
  double u_bar = 0.0;
  double b = 0.0;
  double t = 0.0;
  double df = std::numeric_limits<double>::infinity();
  double lambda = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int m = 0;

  double se() const { return std::sqrt(t); }
};

/// Pools m >= 2 estimates. `df_complete` is the complete-data degrees of
/// freedom for the Barnard-Rubin adjustment (infinite = large-sample).
inline PooledEstimate rubin_pool(const std::vector<double>& estimates, const std::vector<double>& variances,
                                 double level = 0.95,
                                 double df_complete = std::numeric_limits<double>::infinity()) {
  const std::size_t m = estimates.size();
  if (m < 2) throw ConfigError("Rubin pooling needs at least two estimates");
  if (variances.size() != m) throw ConfigError("estimates and variances differ in length");
  for (double u : variances)
    if (!(u >= 0.0)) throw DomainError("within-imputation variances must be nonnegative");
  if (!(df_complete > 0.0)) throw DomainError("complete-data degrees of freedom must be positive");

  PooledEstimate r;
  r.m = static_cast<int>(m);
  // Sorted sums make the result independent of input order.
  auto sorted_sum = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return std::accumulate(v.begin(), v.end(), 0.0);
  };
  r.q_bar = sorted_sum(estimates) / m;
  r.u_bar = sorted_sum(variances) / m;
  std::vector<double> dev(m);
  for (std::size_t k = 0; k < m; ++k) dev[k] = (estimates[k] - r.q_bar) * (estimates[k] - r.q_bar);
  r.b = sorted_sum(dev) / (m - 1);
  const double inflate = (1.0 + 1.0 / m) * r.b;
  r.t = r.u_bar + inflate;
  r.lambda = r.t > 0.0 ? inflate / r.t : 0.0;

  const double inf = std::numeric_limits<double>::infinity();
  const double df_old = r.lambda > 0.0 ? (m - 1) / (r.lambda * r.lambda) : inf;
  const double df_obs =
      std::isfinite(df_complete) ? (df_complete + 1.0) / (df_complete + 3.0) * df_complete * (1.0 - r.lambda) : inf;
  if (std::isfinite(df_old) && std::isfinite(df_obs))
    r.df = df_old * df_obs / (df_old + df_obs);
  else
    r.df = std::min(df_old, df_obs);
  if (!(r.df > 0.0)) r.df = std::numeric_limits<double>::min();

  const double half = t_critical(r.df, level) * std::sqrt(r.t);
  r.ci_low = r.q_bar - half;
  r.ci_high = r.q_bar + half;
  return r;
}

/// Normal-theory interval for a single fit.
inline PooledEstimate wald_estimate(double estimate, double se, double level = 0.95) {
  if (!(se >= 0.0)) throw DomainError("standard error must be nonnegative");
  PooledEstimate r;
  r.m = 1;
  r.q_bar = estimate;
  r.u_bar = r.t = se * se;
  const double half = t_critical(std::numeric_limits<double>::infinity(), level) * se;
  r.ci_low = estimate - half;
  r.ci_high = estimate + half;
  return r;
}

/// One replication's result for a method.
struct EstimateRecord {
  double estimate = 0.0;
  double se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double df = std::numeric_limits<double>::infinity();
  std::optional<double> lambda;  // MI methods only
};

struct Interval {
  double low = 0.0;
  double high = 0.0;
};

/// Wilson score interval for a binomial proportion.
inline Interval wilson_interval(int successes, int trials, double level = 0.95) {
  if (trials <= 0) return {0.0, 1.0};
  const double z = t_critical(std::numeric_limits<double>::infinity(), level);
  const double n = trials, p = successes / n;
  const double denom = 1.0 + z * z / n;
  const double centre = (p + z * z / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom;
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

struct StudyMetrics {
  int n = 0;
  double mean_estimate = 0.0;
  Interval mean_ci;  // Monte Carlo interval for the mean
  double empirical_variance = 0.0;
  std::optional<double> percent_bias;  // absent when truth = 0
  double bias = 0.0;
  double rmse = 0.0;
  double coverage = 0.0;
  Interval coverage_ci;
  double type1_rate = 0.0;
  Interval type1_ci;
  int rejections = 0;
  std::optional<double> mean_lambda;
  std::optional<double> sd_lambda;
};

inline StudyMetrics compute_metrics(const std::vector<EstimateRecord>& records, double truth, double level = 0.95) {
  if (records.empty()) throw ConfigError("no replications to summarise");
  StudyMetrics s;
  s.n = static_cast<int>(records.size());
  const double n = s.n;
  double sum = 0.0, sq = 0.0;
  int covered = 0;
  std::vector<double> lambdas;
  for (const auto& r : records) {
    sum += r.estimate;
    sq += (r.estimate - truth) * (r.estimate - truth);
    if (r.ci_low <= truth && truth <= r.ci_high) ++covered;
    const double crit = t_critical(r.df, 0.95);
    if (r.se > 0.0 && std::abs(r.estimate / r.se) > crit) ++s.rejections;
    if (r.lambda) lambdas.push_back(*r.lambda);
  }
  s.mean_estimate = sum / n;
  double ss = 0.0;
  for (const auto& r : records) ss += (r.estimate - s.mean_estimate) * (r.estimate - s.mean_estimate);
  s.empirical_variance = s.n > 1 ? ss / (n - 1) : 0.0;
  const double mc_half = s.n > 1 ? t_critical(n - 1, level) * std::sqrt(s.empirical_variance / n) : 0.0;
  s.mean_ci = {s.mean_estimate - mc_half, s.mean_estimate + mc_half};
  s.bias = s.mean_estimate - truth;
  if (truth != 0.0) s.percent_bias = 100.0 * s.bias / truth;
  s.rmse = std::sqrt(sq / n);
  s.coverage = covered / n;
  s.coverage_ci = wilson_interval(covered, s.n, level);
  s.type1_rate = s.rejections / n;
  s.type1_ci = wilson_interval(s.rejections, s.n, level);
  if (!lambdas.empty()) {
    const double lm = std::accumulate(lambdas.begin(), lambdas.end(), 0.0) / lambdas.size();
    double lv = 0.0;
    for (double l : lambdas) lv += (l - lm) * (l - lm);
    s.mean_lambda = lm;
    s.sd_lambda = lambdas.size() > 1 ? std::sqrt(lv / (lambdas.size() - 1)) : 0.0;
  }
  return s;
}

}  // namespace mnarjm
