#pragma once

// Synthetic cohorts: log-marker trajectories from a random intercept/slope
// mixed model, events from a discrete-time logistic hazard on the lagged latent
// marker, and shared-parameter (random-effect driven) missingness.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <string_view>

#include "mnarjm/cohort_data.hpp"
#include "mnarjm/errors.hpp"
#include "mnarjm/rng.hpp"

namespace mnarjm {

struct MarkerModelParams {
  double alpha = 2.04;
  double beta_time = -0.02;
  double beta_female = 0.02;
  double beta_older = -0.07;
  double var_a = 0.0236;
  double var_b = 0.0003;
  double var_eps = 0.006;
};

struct CovariateProbs {
  double p_older = 0.47;
  double p_female = 0.5;
};

struct SurvivalModelParams {
  double intercept = -5.0;
  double coef_older = 0.69;
  double coef_female = -0.3;
  double assoc_alpha = 1.4;
};

struct MissingnessParams {
  double intercept = -0.405;
  double gamma1 = 0.0;
  double gamma2 = 0.0;
};

enum class MissingnessPreset { cmar, weak_nmar, strong_nmar };
enum class Hypothesis { h1, h0 };

inline MissingnessParams missingness_preset(MissingnessPreset p) {
  switch (p) {
    case MissingnessPreset::cmar: return {-0.405, 0.0, 0.0};
    case MissingnessPreset::weak_nmar: return {-0.405, 2.0, 5.0};
    case MissingnessPreset::strong_nmar: return {-0.405, 20.0, 25.0};
  }
  throw ConfigError("unknown missingness preset");
}

inline std::string_view to_string(MissingnessPreset p) {
  switch (p) {
    case MissingnessPreset::cmar: return "cmar";
    case MissingnessPreset::weak_nmar: return "weak_nmar";
    case MissingnessPreset::strong_nmar: return "strong_nmar";
  }
  return "?";
}

inline std::string_view to_string(Hypothesis h) { return h == Hypothesis::h1 ? "h1" : "h0"; }

inline MissingnessPreset parse_preset(std::string_view s) {
  if (s == "cmar") return MissingnessPreset::cmar;
  if (s == "weak_nmar" || s == "weak") return MissingnessPreset::weak_nmar;
  if (s == "strong_nmar" || s == "strong") return MissingnessPreset::strong_nmar;
  throw ConfigError("unknown scenario '" + std::string(s) + "'");
}

inline Hypothesis parse_hypothesis(std::string_view s) {
  if (s == "h1") return Hypothesis::h1;
  if (s == "h0") return Hypothesis::h0;
  throw ConfigError("unknown hypothesis '" + std::string(s) + "'");
}

/// Everything needed to generate one cohort.
struct ScenarioConfig {
  int n_subjects = 1000;
  PeriodGrid grid{7};
  MarkerModelParams marker;
  CovariateProbs covariates;
  SurvivalModelParams survival;
  MissingnessParams missingness;
  std::string tag = "custom";

  static ScenarioConfig preset(MissingnessPreset p, Hypothesis h, int n_subjects) {
    ScenarioConfig c;
    c.n_subjects = n_subjects;
    c.missingness = missingness_preset(p);
    c.survival.assoc_alpha = h == Hypothesis::h1 ? 1.4 : 0.0;
    c.tag = std::string(to_string(p)) + "_" + std::string(to_string(h));
    return c;
  }
};

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Fully observed cohort with latent trajectories; event fields unset.
inline CohortDataset simulate_markers(int n, const MarkerModelParams& params, const PeriodGrid& grid,
                                      const CovariateProbs& probs, Rng& rng) {
  if (n < 1) throw ConfigError("need at least one subject");
  if (!(params.var_a >= 0.0) || !(params.var_b >= 0.0) || !(params.var_eps >= 0.0))
    throw ConfigError("marker model variances must be nonnegative");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double sd_a = std::sqrt(params.var_a), sd_b = std::sqrt(params.var_b), sd_e = std::sqrt(params.var_eps);

  CohortDataset cohort;
  cohort.grid = grid;
  cohort.subjects.resize(n);
  for (int i = 0; i < n; ++i) {
    auto& s = cohort.subjects[i];
    s.id = i + 1;
    s.older = unif(rng) < probs.p_older ? 1 : 0;
    s.female = unif(rng) < probs.p_female ? 1 : 0;
    LatentState lat;
    lat.a = sd_a * normal(rng);
    lat.b = sd_b * normal(rng);
    lat.trajectory.resize(grid.n_periods);
    lat.full_marker.resize(grid.n_periods);
    s.marker.resize(grid.n_periods);
    for (int j = 1; j <= grid.n_periods; ++j) {
      const double m = params.alpha + lat.a + (params.beta_time + lat.b) * j + params.beta_female * s.female +
                       params.beta_older * s.older;
      const double w = m + sd_e * normal(rng);
      lat.trajectory[j - 1] = m;
      lat.full_marker[j - 1] = std::exp(w);
      s.marker[j - 1] = std::exp(w);
    }
    s.latent = std::move(lat);
    s.time = grid.n_periods;
    s.event_period = grid.n_periods;
  }
  return cohort;
}

/// Continuous time inside the event period: (period-1) plus an exponential draw
/// truncated to (0, 1], with the rate whose one-period survival is 1 - p.
inline double event_time_in_period(int period, double p, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const double rate = -std::log1p(-p);
  const double u = 1.0 - unif(rng);  // (0, 1]
  const double e = -std::log1p(-u * -std::expm1(-rate)) / rate;
  return (period - 1) + std::min(e, 1.0);
}

/// Discrete-time logistic hazard on the latent lag-1 marker. Period 1 is never
/// at risk; subjects without an event are censored at the end of the grid.
inline CohortDataset simulate_events(const CohortDataset& cohort, const SurvivalModelParams& params, Rng& rng) {
  CohortDataset out = cohort;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  const int J = out.grid.n_periods;
  for (auto& s : out.subjects) {
    if (!s.latent) throw ConfigError("simulate_events needs latent trajectories");
    s.event = 0;
    s.time = J;
    s.event_period = J;
    for (int j = 2; j <= J; ++j) {
      const double p = logistic(params.intercept + params.coef_older * s.older + params.coef_female * s.female +
                                params.assoc_alpha * s.latent->trajectory[j - 2]);
      if (unif(rng) < p) {
        s.event = 1;
        s.time = event_time_in_period(j, p, rng);
        s.event_period = j;
        break;
      }
    }
  }
  return out;
}

/// Masks each cell independently with probability logistic(c + g1 a_i + g2 b_i).
inline CohortDataset apply_missingness(const CohortDataset& cohort, const MissingnessParams& params, Rng& rng) {
  CohortDataset out = cohort;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (auto& s : out.subjects) {
    if (!s.latent) throw ConfigError("apply_missingness needs latent random effects");
    const double p = logistic(params.intercept + params.gamma1 * s.latent->a + params.gamma2 * s.latent->b);
    for (auto& cell : s.marker)
      if (unif(rng) < p) cell.reset();
  }
  return out;
}

/// Markers, events, then missingness, each from its own stream forked off `rng`.
inline CohortDataset simulate_cohort(const ScenarioConfig& config, Rng& rng) {
  Rng marker_rng = fork_stream(rng);
  Rng event_rng = fork_stream(rng);
  Rng miss_rng = fork_stream(rng);
  auto cohort = simulate_markers(config.n_subjects, config.marker, config.grid, config.covariates, marker_rng);
  cohort = simulate_events(cohort, config.survival, event_rng);
  cohort = apply_missingness(cohort, config.missingness, miss_rng);
  cohort.scenario_tag = config.tag;
  return cohort;
}

}  // namespace mnarjm
