#pragma once

// Fully conditional specification (chained equations) imputation of the
// log-marker, one linear model per period, with an outcome feature that is
// compatible with a lagged hazard model. The modified version adds the
// all-missing indicator to the period models.

#include <Eigen/Dense>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mnarjm/cohort_data.hpp"
#include "mnarjm/errors.hpp"
#include "mnarjm/rng.hpp"

namespace mnarjm {

enum class FcsVersion { standard, modified };

inline std::string_view to_string(FcsVersion v) { return v == FcsVersion::standard ? "standard" : "modified"; }

struct ImputationSpec {
  FcsVersion version = FcsVersion::standard;
  int n_multiples = 5;
  int n_iterations = 10;
  int lag = 1;  // 0 = current value
  bool include_post_event_values = true;
  // Indicator in the first period model too (it is dropped there when constant among complete cases).
  bool omit_in_first_period = true;

  void validate() const {
    if (n_multiples < 2) throw ConfigError("need at least two imputations");
    if (n_iterations < 1) throw ConfigError("need at least one FCS iteration");
    if (lag < 0) throw ConfigError("lag must be nonnegative");
  }
};

/// Outcome features per subject (rows) and period (columns).
struct EventFeatures {
  int lag = 1;
  Eigen::MatrixXd indicator;
  std::optional<Eigen::MatrixXd> cumulative_hazard;  // only for lag > 1
  std::vector<double> baseline_hazard;               // per period, null discrete-time model
};

namespace detail {

// Last period in the risk set: the event period, or the period holding the censoring time.
inline int exit_period(const SubjectRecord& s) { return std::max(1, PeriodGrid::period_of(s.time)); }

}  // namespace detail

/// Lag q >= 1: indicator of an event within periods j+1..j+q, plus for q > 1 the
/// baseline hazard accumulated over the periods of that window still at risk.
/// Lag 0: indicator of an event in period j.
inline EventFeatures build_event_features(const CohortDataset& cohort, int lag) {
  if (lag < 0) throw ConfigError("lag must be nonnegative");
  const int n = static_cast<int>(cohort.size());
  const int J = cohort.grid.n_periods;
  EventFeatures f;
  f.lag = lag;
  f.indicator = Eigen::MatrixXd::Zero(n, J);

  // events / at-risk per period
  std::vector<double> events(J + 1, 0.0), at_risk(J + 1, 0.0);
  for (const auto& s : cohort.subjects) {
    const int exit = std::min(detail::exit_period(s), J);
    for (int k = 1; k <= exit; ++k) at_risk[k] += 1.0;
    if (s.event && s.event_period >= 1 && s.event_period <= J) events[s.event_period] += 1.0;
  }
  f.baseline_hazard.assign(J + 1, 0.0);
  for (int k = 1; k <= J; ++k) f.baseline_hazard[k] = at_risk[k] > 0 ? events[k] / at_risk[k] : 0.0;

  if (lag > 1) f.cumulative_hazard = Eigen::MatrixXd::Zero(n, J);
  for (int i = 0; i < n; ++i) {
    const auto& s = cohort.subjects[i];
    for (int j = 1; j <= J; ++j) {
      if (lag == 0) {
        f.indicator(i, j - 1) = (s.event && s.event_period == j) ? 1.0 : 0.0;
        continue;
      }
      f.indicator(i, j - 1) = (s.event && s.event_period >= j + 1 && s.event_period <= j + lag) ? 1.0 : 0.0;
      if (lag > 1) {
        const int last = std::min({j + lag, detail::exit_period(s), J});
        double h = 0.0;
        for (int k = j + 1; k <= last; ++k) h += f.baseline_hazard[k];
        (*f.cumulative_hazard)(i, j - 1) = h;
      }
    }
  }
  return f;
}

/// Step 0: each missing cell gets a value drawn with replacement from the
/// observed values of its period (all periods pooled when a period has none).
inline CohortDataset initial_fill(const CohortDataset& cohort, Rng& rng, std::vector<std::string>* warnings = nullptr) {
  const int J = cohort.grid.n_periods;
  std::vector<std::vector<double>> pool(J);
  std::vector<double> all;
  for (const auto& s : cohort.subjects)
    for (int j = 0; j < J; ++j)
      if (s.marker[j]) {
        pool[j].push_back(*s.marker[j]);
        all.push_back(*s.marker[j]);
      }
  if (all.empty() && cohort.missing_cells() > 0) throw ImputationError("no observed marker values to impute from");
  for (int j = 0; j < J; ++j)
    if (pool[j].empty() && !all.empty()) {
      if (warnings) warnings->push_back("period " + std::to_string(j + 1) + " has no observed values; pooling all periods");
      pool[j] = all;
    }

  CohortDataset out = cohort;
  for (auto& s : out.subjects)
    for (int j = 0; j < J; ++j)
      if (!s.marker[j]) {
        std::uniform_int_distribution<std::size_t> pick(0, pool[j].size() - 1);
        s.marker[j] = pool[j][pick(rng)];
      }
  return out;
}

/// Normal linear regression posterior under the prior p(theta, log sigma^2) = const.
struct RegressionDraw {
  std::vector<int> kept;   // columns of X used, in order
  std::vector<int> dropped;
  Eigen::VectorXd theta_hat;
  double s2 = 0.0;          // residual mean square
  Eigen::MatrixXd xtx_inv;  // (X'X)^-1 over kept columns
  double sigma2 = 0.0;      // drawn
  Eigen::VectorXd theta;    // drawn
};

/// Columns kept by sequential orthogonalisation; a column whose residual
/// after projection on the kept ones is negligible is dropped.
inline std::vector<int> independent_columns(const Eigen::MatrixXd& X, double tol = 1e-9) {
  std::vector<int> kept;
  Eigen::MatrixXd Q(X.rows(), X.cols());
  for (int c = 0; c < X.cols(); ++c) {
    Eigen::VectorXd v = X.col(c);
    const double norm0 = v.norm();
    if (norm0 == 0.0) continue;
    for (int r = 0; r < 2; ++r)  // twice is enough
      for (std::size_t q = 0; q < kept.size(); ++q) v -= Q.col(q).dot(v) * Q.col(q);
    const double norm = v.norm();
    if (norm <= tol * norm0) continue;
    Q.col(kept.size()) = v / norm;
    kept.push_back(c);
  }
  return kept;
}

inline RegressionDraw draw_regression_posterior(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, Rng& rng) {
  RegressionDraw d;
  d.kept = independent_columns(X);
  for (int c = 0, k = 0; c < X.cols(); ++c) {
    if (k < static_cast<int>(d.kept.size()) && d.kept[k] == c)
      ++k;
    else
      d.dropped.push_back(c);
  }
  const int n = static_cast<int>(X.rows());
  const int k = static_cast<int>(d.kept.size());
  if (n - k <= 0)
    throw ImputationError("imputation model has " + std::to_string(n) + " complete cases for " + std::to_string(k) +
                          " predictors");
  Eigen::MatrixXd Xk(n, k);
  for (int c = 0; c < k; ++c) Xk.col(c) = X.col(d.kept[c]);

  Eigen::MatrixXd xtx = Xk.transpose() * Xk;
  Eigen::LLT<Eigen::MatrixXd> llt(xtx);
  if (llt.info() != Eigen::Success) throw ImputationError("imputation design is not positive definite");
  d.theta_hat = llt.solve(Xk.transpose() * y);
  d.xtx_inv = llt.solve(Eigen::MatrixXd::Identity(k, k));
  const Eigen::VectorXd resid = y - Xk * d.theta_hat;
  d.s2 = resid.squaredNorm() / (n - k);

  std::chi_squared_distribution<double> chi2(n - k);
  std::normal_distribution<double> normal(0.0, 1.0);
  d.sigma2 = (n - k) * d.s2 / chi2(rng);
  Eigen::VectorXd z(k);
  for (int c = 0; c < k; ++c) z(c) = normal(rng);
  // Cov = sigma2 (L L')^-1 = sigma2 L^-T L^-1
  d.theta = d.theta_hat + std::sqrt(d.sigma2) * llt.matrixU().solve(z);
  return d;
}

/// One fitted-and-drawn period model.
struct PeriodImputationModel {
  int target_period = 0;
  std::vector<std::string> predictors;  // candidate set, in design order
  std::vector<std::string> dropped;     // removed as collinear
  Eigen::VectorXd theta;                // over retained predictors
  double sigma2 = 0.0;
  int n_complete = 0;
};

/// Working state of one chain: log-marker matrix plus the fixed covariates.
struct FcsState {
  Eigen::MatrixXd log_marker;  // n x J, current completed values
  std::vector<std::vector<char>> impute;  // cells redrawn every sweep
  Eigen::VectorXd female, older, omit;
  const EventFeatures* features = nullptr;
  ImputationSpec spec;
};

namespace detail {

inline std::vector<std::string> predictor_names(const FcsState& st, int period) {
  const int J = static_cast<int>(st.log_marker.cols());
  std::vector<std::string> names{"intercept", "female", "older"};
  for (int k = 1; k <= J; ++k)
    if (k != period) names.push_back("log_marker_" + std::to_string(k));
  names.push_back("event_feature");
  if (st.features->cumulative_hazard) names.push_back("cumulative_baseline_hazard");
  if (st.spec.version == FcsVersion::modified && (period > 1 || st.spec.omit_in_first_period))
    names.push_back("omit");
  return names;
}

inline Eigen::MatrixXd period_design(const FcsState& st, int period) {
  const int n = static_cast<int>(st.log_marker.rows());
  const int J = static_cast<int>(st.log_marker.cols());
  const bool with_ch = st.features->cumulative_hazard.has_value();
  const bool with_omit = st.spec.version == FcsVersion::modified && (period > 1 || st.spec.omit_in_first_period);
  const int p = 3 + (J - 1) + 1 + with_ch + with_omit;
  Eigen::MatrixXd X(n, p);
  X.col(0).setOnes();
  X.col(1) = st.female;
  X.col(2) = st.older;
  int c = 3;
  for (int k = 1; k <= J; ++k)
    if (k != period) X.col(c++) = st.log_marker.col(k - 1);
  X.col(c++) = st.features->indicator.col(period - 1);
  if (with_ch) X.col(c++) = st.features->cumulative_hazard->col(period - 1);
  if (with_omit) X.col(c++) = st.omit;
  return X;
}

}  // namespace detail

/// Fits the period model on subjects whose value for `period` is not being
/// imputed, draws (theta, sigma^2) from the posterior, and redraws the
/// imputed cells of that period in place.
inline PeriodImputationModel draw_posterior_and_impute(int period, FcsState& st, Rng& rng) {
  const int n = static_cast<int>(st.log_marker.rows());
  const Eigen::MatrixXd X = detail::period_design(st, period);
  std::vector<int> complete, missing;
  for (int i = 0; i < n; ++i) (st.impute[i][period - 1] ? missing : complete).push_back(i);

  PeriodImputationModel model;
  model.target_period = period;
  model.predictors = detail::predictor_names(st, period);
  model.n_complete = static_cast<int>(complete.size());

  Eigen::MatrixXd Xc(complete.size(), X.cols());
  Eigen::VectorXd yc(complete.size());
  for (std::size_t r = 0; r < complete.size(); ++r) {
    Xc.row(r) = X.row(complete[r]);
    yc(r) = st.log_marker(complete[r], period - 1);
  }
  RegressionDraw draw;
  try {
    draw = draw_regression_posterior(Xc, yc, rng);
  } catch (const ImputationError& e) {
    throw ImputationError("period " + std::to_string(period) + ": " + e.what());
  }
  for (int c : draw.dropped) model.dropped.push_back(model.predictors[c]);
  model.theta = draw.theta;
  model.sigma2 = draw.sigma2;

  std::normal_distribution<double> normal(0.0, 1.0);
  const double sd = std::sqrt(draw.sigma2);
  for (int i : missing) {
    double mu = 0.0;
    for (std::size_t c = 0; c < draw.kept.size(); ++c) mu += X(i, draw.kept[c]) * draw.theta(c);
    st.log_marker(i, period - 1) = mu + sd * normal(rng);
  }
  return model;
}

/// One imputation multiple: the cohort with every missing cell filled.
struct CompletedDataset {
  int multiple_index = 0;
  CohortDataset cohort;
};

struct FcsRun {
  std::vector<CompletedDataset> multiples;
  std::vector<std::vector<PeriodImputationModel>> final_models;  // [multiple][period-1], last sweep
  // Largest absolute change of a period's imputed-cell mean between consecutive
  // sweeps, [multiple][sweep-1]. Reported only.
  std::vector<std::vector<double>> sweep_change;
  std::vector<std::string> warnings;
};

/// Chained-equations imputation producing spec.n_multiples completed datasets.
/// The cohort is expected to have its all-missing flag derived.
inline FcsRun run_fcs(const CohortDataset& cohort, const ImputationSpec& spec, Rng& rng) {
  spec.validate();
  const int n = static_cast<int>(cohort.size());
  const int J = cohort.grid.n_periods;
  const EventFeatures features = build_event_features(cohort, spec.lag);

  FcsRun run;
  std::vector<Rng> streams;
  for (int m = 0; m < spec.n_multiples; ++m) streams.push_back(fork_stream(rng));

  // Cells left out of the working data when post-event values are excluded.
  CohortDataset working = cohort;
  if (!spec.include_post_event_values)
    for (auto& s : working.subjects)
      for (int j = 1; j <= J; ++j)
        if (cohort.grid.measurement_time(j) > s.time) s.marker[j - 1].reset();

  std::vector<std::vector<char>> impute(n, std::vector<char>(J, 0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < J; ++j) impute[i][j] = !working.subjects[i].marker[j].has_value();

  for (int m = 0; m < spec.n_multiples; ++m) {
    Rng& r = streams[m];
    const CohortDataset filled = initial_fill(working, r, m == 0 ? &run.warnings : nullptr);

    FcsState st;
    st.spec = spec;
    st.features = &features;
    st.impute = impute;
    st.log_marker.resize(n, J);
    st.female.resize(n);
    st.older.resize(n);
    st.omit.resize(n);
    for (int i = 0; i < n; ++i) {
      const auto& s = filled.subjects[i];
      st.female(i) = s.female;
      st.older(i) = s.older;
      st.omit(i) = s.omit;
      for (int j = 0; j < J; ++j) st.log_marker(i, j) = std::log(*s.marker[j]);
    }

    auto imputed_means = [&] {
      std::vector<double> mean(J, 0.0);
      for (int j = 0; j < J; ++j) {
        int cnt = 0;
        for (int i = 0; i < n; ++i)
          if (st.impute[i][j]) mean[j] += st.log_marker(i, j), ++cnt;
        mean[j] = cnt ? mean[j] / cnt : 0.0;
      }
      return mean;
    };

    std::vector<PeriodImputationModel> models(J);
    std::vector<double> changes;
    auto previous = imputed_means();
    for (int k = 0; k < spec.n_iterations; ++k) {
      for (int j = 1; j <= J; ++j) {
        bool any = false;
        for (int i = 0; i < n && !any; ++i) any = st.impute[i][j - 1];
        if (!any) continue;
        models[j - 1] = draw_posterior_and_impute(j, st, r);
        if (m == 0 && k == 0)
          for (const auto& d : models[j - 1].dropped)
            run.warnings.push_back("period " + std::to_string(j) + ": dropped collinear predictor " + d);
      }
      auto current = imputed_means();
      double delta = 0.0;
      for (int j = 0; j < J; ++j) delta = std::max(delta, std::abs(current[j] - previous[j]));
      changes.push_back(delta);
      previous = std::move(current);
    }

    CompletedDataset out;
    out.multiple_index = m + 1;
    out.cohort = cohort;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < J; ++j)
        if (!cohort.subjects[i].marker[j]) out.cohort.subjects[i].marker[j] = std::exp(st.log_marker(i, j));
    run.multiples.push_back(std::move(out));
    run.final_models.push_back(std::move(models));
    run.sweep_change.push_back(std::move(changes));
  }
  return run;
}

/// Removes cells measured after the event or censoring time. A measurement at
/// exactly that time is kept.
inline CompletedDataset truncate_post_event(const CompletedDataset& completed) {
  CompletedDataset out = completed;
  const auto& grid = out.cohort.grid;
  for (auto& s : out.cohort.subjects)
    for (int j = 1; j <= grid.n_periods; ++j)
      if (grid.measurement_time(j) > s.time) s.marker[j - 1].reset();
  return out;
}

struct DiagnosticsRow {
  int period = 0;
  std::string subgroup;  // "all_missing" or "rest"
  std::optional<double> fully_observed;
  double standard = 0.0;
  double modified = 0.0;
  double ratio = 0.0;  // modified / standard
  int n_subjects = 0;
};

struct DiagnosticsTable {
  std::vector<DiagnosticsRow> rows;

  /// Mean of the per-period version ratios within a subgroup (NaN if empty).
  double mean_ratio(const std::string& subgroup) const {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : rows)
      if (r.subgroup == subgroup && std::isfinite(r.ratio)) sum += r.ratio, ++n;
    return n ? sum / n : std::nan("");
  }
};

/// Mean completed log-marker per period and subgroup (all-missing vs rest),
/// averaged over multiples, for both FCS versions. Values after the event are
/// included. `reference` supplies the pre-missingness values for the same subjects.
inline DiagnosticsTable imputation_diagnostics(const std::vector<CompletedDataset>& standard,
                                               const std::vector<CompletedDataset>& modified,
                                               const CohortDataset* reference = nullptr) {
  if (standard.empty() || modified.empty()) throw ConfigError("diagnostics need completed sets for both versions");
  const auto& base = standard.front().cohort;
  const int J = base.grid.n_periods;
  const int n = static_cast<int>(base.size());
  if (reference && static_cast<int>(reference->size()) != n)
    throw ConfigError("reference cohort does not match the completed datasets");

  auto set_mean = [&](const std::vector<CompletedDataset>& sets, int j, int group) {
    double total = 0.0;
    int cnt = 0;
    for (const auto& cd : sets)
      for (int i = 0; i < n; ++i) {
        const auto& s = cd.cohort.subjects[i];
        if (s.omit != group || !s.marker[j - 1]) continue;
        total += std::log(*s.marker[j - 1]);
        ++cnt;
      }
    return cnt ? total / cnt : std::nan("");
  };

  DiagnosticsTable table;
  for (int group : {1, 0}) {
    int members = 0;
    for (const auto& s : base.subjects) members += s.omit == group;
    for (int j = 1; j <= J; ++j) {
      DiagnosticsRow row;
      row.period = j;
      row.subgroup = group ? "all_missing" : "rest";
      row.n_subjects = members;
      row.standard = set_mean(standard, j, group);
      row.modified = set_mean(modified, j, group);
      row.ratio = row.modified / row.standard;
      if (reference) {
        double total = 0.0;
        int cnt = 0;
        for (int i = 0; i < n; ++i) {
          const auto& s = reference->subjects[i];
          if (base.subjects[i].omit != group || !s.marker[j - 1]) continue;
          total += std::log(*s.marker[j - 1]);
          ++cnt;
        }
        row.fully_observed = cnt ? total / cnt : std::nan("");
      }
      table.rows.push_back(std::move(row));
    }
  }
  return table;
}

}  // namespace mnarjm
