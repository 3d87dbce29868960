#pragma once

// Monte Carlo studies over simulated cohorts and the two-step
// (impute, then joint model) analysis of an ingested cohort.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <exception>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "mnarjm/cohort_data.hpp"
#include "mnarjm/cohort_sim.hpp"
#include "mnarjm/csv_io.hpp"
#include "mnarjm/errors.hpp"
#include "mnarjm/fcs_engine.hpp"
#include "mnarjm/joint_model.hpp"
#include "mnarjm/pooling_stats.hpp"
#include "mnarjm/rng.hpp"

namespace mnarjm {

inline constexpr const char* kVersion = "mnarjm 1.0.0";

enum class Method { fully_observed_jm, standard_jm, standard_fcs_jm, modified_fcs_jm };

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::fully_observed_jm: return "fully_observed_jm";
    case Method::standard_jm: return "standard_jm";
    case Method::standard_fcs_jm: return "standard_fcs_jm";
    case Method::modified_fcs_jm: return "modified_fcs_jm";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : {Method::fully_observed_jm, Method::standard_jm, Method::standard_fcs_jm, Method::modified_fcs_jm})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown method '" + std::string(s) + "'");
}

inline std::vector<Method> all_methods() {
  return {Method::fully_observed_jm, Method::standard_jm, Method::standard_fcs_jm, Method::modified_fcs_jm};
}

struct StudyConfig {
  std::string profile = "desk";
  int n_subjects = 1000;
  int n_replications = 100;
  MissingnessPreset scenario = MissingnessPreset::strong_nmar;
  Hypothesis hypothesis = Hypothesis::h1;
  std::vector<Method> methods = all_methods();
  ImputationSpec imputation;
  JointModelSpec joint;
  std::uint64_t master_seed = 20240607;
  int n_workers = 1;
  std::string output_dir = "study_out";

  void validate() const {
    if (n_subjects < 10) throw ConfigError("n_subjects must be at least 10");
    if (n_replications < 1) throw ConfigError("n_replications must be at least 1");
    if (methods.empty()) throw ConfigError("no methods requested");
    if (n_workers < 1) throw ConfigError("n_workers must be at least 1");
    imputation.validate();
    if (joint.quadrature_order < 1 || joint.legendre_order < 1) throw ConfigError("quadrature orders must be positive");
  }

  ScenarioConfig scenario_config() const { return ScenarioConfig::preset(scenario, hypothesis, n_subjects); }

  double truth() const { return scenario_config().survival.assoc_alpha; }

  bool has(Method m) const { return std::find(methods.begin(), methods.end(), m) != methods.end(); }

  /// Desk profile: n = 1000, 100 (H1) or 400 (H0) replications, 5-point rule.
  /// Paper profile: n = 4000, 400 (H1) or 1600 (H0) replications, 9-point rule.
  static StudyConfig profile_defaults(const std::string& name, Hypothesis h) {
    StudyConfig c;
    c.profile = name;
    c.hypothesis = h;
    if (name == "desk") {
      c.n_subjects = 1000;
      c.n_replications = h == Hypothesis::h1 ? 100 : 400;
      c.joint.quadrature_order = 5;
    } else if (name == "paper") {
      c.n_subjects = 4000;
      c.n_replications = h == Hypothesis::h1 ? 400 : 1600;
      c.joint.quadrature_order = 9;
    } else {
      throw ConfigError("unknown profile '" + name + "'");
    }
    return c;
  }
};

inline nlohmann::ordered_json to_json(const StudyConfig& c, bool with_execution = true) {
  nlohmann::ordered_json j;
  j["profile"] = c.profile;
  j["n_subjects"] = c.n_subjects;
  j["n_replications"] = c.n_replications;
  j["scenario"] = std::string(to_string(c.scenario));
  j["hypothesis"] = std::string(to_string(c.hypothesis));
  j["methods"] = nlohmann::ordered_json::array();
  for (Method m : c.methods) j["methods"].push_back(std::string(to_string(m)));
  j["imputation"] = {{"n_multiples", c.imputation.n_multiples},
                     {"n_iterations", c.imputation.n_iterations},
                     {"lag", c.imputation.lag},
                     {"include_post_event_values", c.imputation.include_post_event_values},
                     {"omit_in_first_period", c.imputation.omit_in_first_period}};
  j["joint_model"] = {{"lag", c.joint.lag},
                      {"risk_start", c.joint.risk_start},
                      {"quadrature_order", c.joint.quadrature_order},
                      {"legendre_order", c.joint.legendre_order},
                      {"max_marker_period", c.joint.max_marker_period},
                      {"max_adaptations", c.joint.max_adaptations},
                      {"max_iterations", c.joint.optim.max_iterations},
                      {"rel_tol", c.joint.optim.rel_tol},
                      {"grad_tol", c.joint.optim.grad_tol}};
  j["master_seed"] = c.master_seed;
  if (with_execution) {
    j["n_workers"] = c.n_workers;
    j["output_dir"] = c.output_dir;
  }
  return j;
}

/// Overlays the keys present in `j` on `c`.
inline void apply_json(const nlohmann::json& j, StudyConfig& c) {
  try {
    if (j.contains("n_subjects")) c.n_subjects = j.at("n_subjects").get<int>();
    if (j.contains("n_replications")) c.n_replications = j.at("n_replications").get<int>();
    if (j.contains("scenario")) c.scenario = parse_preset(j.at("scenario").get<std::string>());
    if (j.contains("hypothesis")) c.hypothesis = parse_hypothesis(j.at("hypothesis").get<std::string>());
    if (j.contains("methods")) {
      c.methods.clear();
      for (const auto& m : j.at("methods")) c.methods.push_back(parse_method(m.get<std::string>()));
    }
    if (j.contains("imputation")) {
      const auto& i = j.at("imputation");
      if (i.contains("n_multiples")) c.imputation.n_multiples = i.at("n_multiples").get<int>();
      if (i.contains("n_iterations")) c.imputation.n_iterations = i.at("n_iterations").get<int>();
      if (i.contains("lag")) c.imputation.lag = i.at("lag").get<int>();
      if (i.contains("include_post_event_values"))
        c.imputation.include_post_event_values = i.at("include_post_event_values").get<bool>();
      if (i.contains("omit_in_first_period"))
        c.imputation.omit_in_first_period = i.at("omit_in_first_period").get<bool>();
    }
    if (j.contains("joint_model")) {
      const auto& m = j.at("joint_model");
      if (m.contains("lag")) c.joint.lag = m.at("lag").get<int>();
      if (m.contains("risk_start")) c.joint.risk_start = m.at("risk_start").get<double>();
      if (m.contains("quadrature_order")) c.joint.quadrature_order = m.at("quadrature_order").get<int>();
      if (m.contains("legendre_order")) c.joint.legendre_order = m.at("legendre_order").get<int>();
      if (m.contains("max_marker_period")) c.joint.max_marker_period = m.at("max_marker_period").get<int>();
      if (m.contains("max_adaptations")) c.joint.max_adaptations = m.at("max_adaptations").get<int>();
      if (m.contains("max_iterations")) c.joint.optim.max_iterations = m.at("max_iterations").get<int>();
      if (m.contains("rel_tol")) c.joint.optim.rel_tol = m.at("rel_tol").get<double>();
      if (m.contains("grad_tol")) c.joint.optim.grad_tol = m.at("grad_tol").get<double>();
    }
    if (j.contains("master_seed")) c.master_seed = j.at("master_seed").get<std::uint64_t>();
    if (j.contains("n_workers")) c.n_workers = j.at("n_workers").get<int>();
    if (j.contains("output_dir")) c.output_dir = j.at("output_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

/// Profile defaults (the file's "profile" key, else desk), then the file.
inline StudyConfig load_study_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
  const std::string profile = j.value("profile", std::string("desk"));
  const Hypothesis h = parse_hypothesis(j.value("hypothesis", std::string("h1")));
  StudyConfig c = StudyConfig::profile_defaults(profile, h);
  apply_json(j, c);
  return c;
}

// ---------------------------------------------------------------------------

struct MethodRecord {
  Method method{};
  bool ok = false;
  EstimateRecord estimate;
  int n_subjects = 0;
  std::string error;
};

struct ReplicationResult {
  int index = 0;
  int n_subjects = 0;  // after dropping subjects followed < 1 period
  int omit_size = 0;
  double missing_rate = 0.0;
  std::vector<MethodRecord> records;
  std::optional<DiagnosticsTable> diagnostics;
};

namespace detail {

inline PooledEstimate pool_fits(const std::vector<JointFit>& fits, int n_subjects) {
  std::vector<double> q, u;
  for (const auto& f : fits) {
    q.push_back(f.alpha());
    u.push_back(f.alpha_se() * f.alpha_se());
  }
  const double df_com = std::max(1, n_subjects - fits.front().n_params());
  return rubin_pool(q, u, 0.95, df_com);
}

inline EstimateRecord to_record(const PooledEstimate& p) {
  EstimateRecord r;
  r.estimate = p.q_bar;
  r.se = p.se();
  r.ci_low = p.ci_low;
  r.ci_high = p.ci_high;
  r.df = p.df;
  if (p.m > 1) r.lambda = p.lambda;
  return r;
}

inline std::vector<JointFit> fit_multiples(const FcsRun& run, const JointModelSpec& spec) {
  std::vector<JointFit> fits;
  for (const auto& cd : run.multiples) fits.push_back(fit_jm(truncate_post_event(cd).cohort, spec, false));
  return fits;
}

}  // namespace detail

/// One replication, a pure function of (config, index).
inline ReplicationResult run_replication(const StudyConfig& config, int index) {
  ReplicationResult out;
  out.index = index;
  const auto idx = static_cast<std::uint64_t>(index);
  Rng sim_rng = make_stream(config.master_seed, {idx, 0});
  const CohortDataset cohort = derive_omit(simulate_cohort(config.scenario_config(), sim_rng));
  out.n_subjects = static_cast<int>(cohort.size());
  for (const auto& s : cohort.subjects) out.omit_size += s.omit;
  out.missing_rate =
      static_cast<double>(cohort.missing_cells()) / std::max<std::size_t>(1, cohort.size() * cohort.grid.n_periods);

  std::optional<FcsRun> fcs_standard, fcs_modified;
  for (Method m : config.methods) {
    MethodRecord rec;
    rec.method = m;
    try {
      switch (m) {
        case Method::fully_observed_jm: {
          const JointFit f = fit_jm(fully_observed(cohort), config.joint, false);
          rec.estimate = detail::to_record(wald_estimate(f.alpha(), f.alpha_se()));
          rec.n_subjects = f.n_subjects;
          break;
        }
        case Method::standard_jm: {
          const JointFit f = fit_jm(cohort, config.joint, true);
          rec.estimate = detail::to_record(wald_estimate(f.alpha(), f.alpha_se()));
          rec.n_subjects = f.n_subjects;
          break;
        }
        case Method::standard_fcs_jm:
        case Method::modified_fcs_jm: {
          ImputationSpec spec = config.imputation;
          spec.version = m == Method::standard_fcs_jm ? FcsVersion::standard : FcsVersion::modified;
          // Both versions share a stream: differences come from the model only.
          Rng fcs_rng = make_stream(config.master_seed, {idx, 1});
          auto& slot = m == Method::standard_fcs_jm ? fcs_standard : fcs_modified;
          slot = run_fcs(cohort, spec, fcs_rng);
          const auto fits = detail::fit_multiples(*slot, config.joint);
          rec.estimate = detail::to_record(detail::pool_fits(fits, out.n_subjects));
          rec.n_subjects = fits.front().n_subjects;
          break;
        }
      }
      rec.ok = std::isfinite(rec.estimate.estimate) && std::isfinite(rec.estimate.se);
      if (!rec.ok) rec.error = "non-finite estimate";
    } catch (const FitError& e) {
      rec.error = std::string(e.what()) + (e.diagnostics().empty() ? "" : " [" + e.diagnostics() + "]");
    } catch (const std::exception& e) {
      rec.error = e.what();
    }
    out.records.push_back(std::move(rec));
  }
  if (fcs_standard && fcs_modified) {
    const CohortDataset reference = fully_observed(cohort);
    out.diagnostics = imputation_diagnostics(fcs_standard->multiples, fcs_modified->multiples, &reference);
  }
  return out;
}

struct MethodSummary {
  Method method{};
  int n_ok = 0;
  int n_failed = 0;
  bool flagged = false;  // more than 5% failures
  std::optional<StudyMetrics> metrics;
  std::vector<std::string> failure_messages;  // first few
};

struct ScenarioReport {
  StudyConfig config;
  double truth = 0.0;
  std::vector<ReplicationResult> replications;  // index order
  std::vector<MethodSummary> methods;
  std::optional<DiagnosticsTable> diagnostics;  // averaged over replications
  double mean_omit_size = 0.0;
  double mean_missing_rate = 0.0;
  bool non_comparable = false;

  const MethodSummary* find(Method m) const {
    for (const auto& s : methods)
      if (s.method == m) return &s;
    return nullptr;
  }
};

/// Averages per-replication diagnostics row by row.
inline DiagnosticsTable average_diagnostics(const std::vector<const DiagnosticsTable*>& tables) {
  DiagnosticsTable out;
  if (tables.empty()) return out;
  out.rows = tables.front()->rows;
  for (std::size_t r = 0; r < out.rows.size(); ++r) {
    double st = 0.0, mo = 0.0, fo = 0.0, size = 0.0;
    int n = 0, nfo = 0;
    for (const auto* t : tables) {
      const auto& row = t->rows[r];
      size += row.n_subjects;
      if (!std::isfinite(row.standard) || !std::isfinite(row.modified)) continue;
      st += row.standard;
      mo += row.modified;
      ++n;
      if (row.fully_observed && std::isfinite(*row.fully_observed)) fo += *row.fully_observed, ++nfo;
    }
    auto& row = out.rows[r];
    row.n_subjects = static_cast<int>(std::lround(size / tables.size()));
    row.standard = n ? st / n : std::nan("");
    row.modified = n ? mo / n : std::nan("");
    row.ratio = row.modified / row.standard;
    row.fully_observed = nfo ? std::optional<double>(fo / nfo) : std::nullopt;
  }
  return out;
}

/// Runs every replication on a pool of `n_workers` threads and aggregates in
/// index order, so the result does not depend on the worker count.
inline ScenarioReport run_study(const StudyConfig& config) {
  config.validate();
  ScenarioReport report;
  report.config = config;
  report.truth = config.truth();
  const int n = config.n_replications;
  report.replications.resize(n);

  std::atomic<int> next{0};
  std::vector<std::exception_ptr> errors(n);
  auto worker = [&] {
    for (int i; (i = next.fetch_add(1)) < n;) {
      try {
        report.replications[i] = run_replication(config, i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int workers = std::min(config.n_workers, n);
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  for (Method m : config.methods) {
    MethodSummary s;
    s.method = m;
    std::vector<EstimateRecord> ok;
    for (const auto& rep : report.replications)
      for (const auto& rec : rep.records) {
        if (rec.method != m) continue;
        if (rec.ok) {
          ok.push_back(rec.estimate);
        } else {
          ++s.n_failed;
          if (s.failure_messages.size() < 5)
            s.failure_messages.push_back("replication " + std::to_string(rep.index) + ": " + rec.error);
        }
      }
    s.n_ok = static_cast<int>(ok.size());
    if (!ok.empty()) s.metrics = compute_metrics(ok, report.truth);
    s.flagged = s.n_failed > 0.05 * n;
    report.non_comparable = report.non_comparable || s.flagged;
    report.methods.push_back(std::move(s));
  }

  std::vector<const DiagnosticsTable*> tables;
  double omit = 0.0, miss = 0.0;
  for (const auto& rep : report.replications) {
    if (rep.diagnostics) tables.push_back(&*rep.diagnostics);
    omit += rep.omit_size;
    miss += rep.missing_rate;
  }
  if (!tables.empty()) report.diagnostics = average_diagnostics(tables);
  report.mean_omit_size = omit / n;
  report.mean_missing_rate = miss / n;
  return report;
}

// ---------------------------------------------------------------------------
// Report writers. Fixed precision and no timestamps: identical inputs give
// identical bytes.

namespace detail {

inline std::string fixed(double v, int digits = 4) {
  if (std::isnan(v)) return "NA";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string opt_fixed(const std::optional<double>& v, int digits = 4) { return v ? fixed(*v, digits) : "NA"; }

inline std::string pad(const std::string& s, std::size_t width) {
  return s.size() >= width ? s + " " : s + std::string(width - s.size(), ' ');
}

}  // namespace detail

inline void write_report_csv(const ScenarioReport& r, std::ostream& os) {
  using detail::fixed;
  using detail::opt_fixed;
  os << "scenario,hypothesis,method,n_ok,n_failed,flagged,truth,mean,mean_ci_low,mean_ci_high,percent_bias,bias,"
        "rmse,empirical_variance,coverage,coverage_ci_low,coverage_ci_high,mean_lambda,sd_lambda,type1,type1_ci_low,"
        "type1_ci_high\n";
  for (const auto& s : r.methods) {
    os << to_string(r.config.scenario) << ',' << to_string(r.config.hypothesis) << ',' << to_string(s.method) << ','
       << s.n_ok << ',' << s.n_failed << ',' << (s.flagged ? 1 : 0) << ',' << fixed(r.truth);
    if (s.metrics) {
      const auto& m = *s.metrics;
      os << ',' << fixed(m.mean_estimate) << ',' << fixed(m.mean_ci.low) << ',' << fixed(m.mean_ci.high) << ','
         << opt_fixed(m.percent_bias, 2) << ',' << fixed(m.bias) << ',' << fixed(m.rmse) << ','
         << fixed(m.empirical_variance, 6) << ',' << fixed(m.coverage) << ',' << fixed(m.coverage_ci.low) << ','
         << fixed(m.coverage_ci.high) << ',' << opt_fixed(m.mean_lambda) << ',' << opt_fixed(m.sd_lambda) << ','
         << fixed(m.type1_rate) << ',' << fixed(m.type1_ci.low) << ',' << fixed(m.type1_ci.high);
    } else {
      for (int k = 0; k < 15; ++k) os << ",NA";
    }
    os << '\n';
  }
}

inline void write_diagnostics_csv(const DiagnosticsTable& t, std::ostream& os) {
  using detail::fixed;
  os << "subgroup,period,n_subjects,fully_observed,standard_fcs,modified_fcs,ratio\n";
  for (const auto& row : t.rows)
    os << row.subgroup << ',' << row.period << ',' << row.n_subjects << ',' << detail::opt_fixed(row.fully_observed)
       << ',' << fixed(row.standard) << ',' << fixed(row.modified) << ',' << fixed(row.ratio) << '\n';
}

inline void write_estimates_csv(const ScenarioReport& r, std::ostream& os) {
  using detail::format_double;
  os << "replication,method,ok,estimate,se,ci_low,ci_high,df,lambda,n_subjects,error\n";
  for (const auto& rep : r.replications)
    for (const auto& rec : rep.records) {
      os << rep.index << ',' << to_string(rec.method) << ',' << (rec.ok ? 1 : 0) << ',';
      if (rec.ok) {
        const auto& e = rec.estimate;
        os << format_double(e.estimate) << ',' << format_double(e.se) << ',' << format_double(e.ci_low) << ','
           << format_double(e.ci_high) << ',' << (std::isfinite(e.df) ? format_double(e.df) : "Inf") << ','
           << (e.lambda ? format_double(*e.lambda) : "NA") << ',' << rec.n_subjects << ',';
      } else {
        os << "NA,NA,NA,NA,NA,NA,NA,";
      }
      std::string msg = rec.error;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      os << msg << '\n';
    }
}

inline void write_report_text(const ScenarioReport& r, std::ostream& os) {
  using detail::fixed;
  using detail::pad;
  const bool h0 = r.config.hypothesis == Hypothesis::h0;
  os << kVersion << "\n";
  os << "Scenario " << to_string(r.config.scenario) << ", hypothesis " << to_string(r.config.hypothesis)
     << ", true association " << fixed(r.truth, 2) << "\n";
  os << "Replications " << r.config.n_replications << " of " << r.config.n_subjects << " subjects"
     << ", mean missing rate " << fixed(r.mean_missing_rate, 3) << ", mean all-missing subgroup "
     << fixed(r.mean_omit_size, 1) << "\n\n";

  os << pad("Method", 20) << pad("Mean logHR (95% CI)", 26) << pad("PB", 10) << pad("RMSE", 8) << pad("Coverage", 10)
     << pad("Lambda (SD)", 16);
  if (h0) os << pad("Type-I (95% CI)", 24);
  os << "Failed\n";
  for (const auto& s : r.methods) {
    os << pad(std::string(to_string(s.method)), 20);
    if (!s.metrics) {
      os << "no successful replications; failed " << s.n_failed << "\n";
      continue;
    }
    const auto& m = *s.metrics;
    os << pad(fixed(m.mean_estimate, 3) + " (" + fixed(m.mean_ci.low, 3) + ", " + fixed(m.mean_ci.high, 3) + ")", 26);
    os << pad(m.percent_bias ? fixed(*m.percent_bias, 1) + "%" : "bias " + fixed(m.bias, 3), 10);
    os << pad(fixed(m.rmse, 3), 8) << pad(fixed(100.0 * m.coverage, 1) + "%", 10);
    os << pad(m.mean_lambda ? fixed(*m.mean_lambda, 3) + " (" + fixed(*m.sd_lambda, 3) + ")" : "-", 16);
    if (h0)
      os << pad(fixed(100.0 * m.type1_rate, 1) + "% (" + fixed(100.0 * m.type1_ci.low, 1) + ", " +
                    fixed(100.0 * m.type1_ci.high, 1) + ")",
                24);
    os << s.n_failed << (s.flagged ? " FLAGGED" : "") << "\n";
  }
  if (r.non_comparable) os << "\nWARNING: more than 5% of replications failed for a method; not comparable.\n";
  for (const auto& s : r.methods)
    for (const auto& msg : s.failure_messages) os << "  " << to_string(s.method) << " " << msg << "\n";

  if (r.diagnostics) {
    os << "\nCompleted log-marker by period (averaged over replications and multiples)\n";
    os << pad("Subgroup", 13) << pad("Period", 8) << pad("N", 8) << pad("Fully obs.", 12) << pad("Standard", 10)
       << pad("Modified", 10) << "Ratio\n";
    for (const auto& row : r.diagnostics->rows)
      os << pad(row.subgroup, 13) << pad(std::to_string(row.period), 8) << pad(std::to_string(row.n_subjects), 8)
         << pad(detail::opt_fixed(row.fully_observed, 3), 12) << pad(fixed(row.standard, 3), 10)
         << pad(fixed(row.modified, 3), 10) << fixed(row.ratio, 3) << "\n";
    os << "Mean ratio, all-missing subgroup: " << fixed(r.diagnostics->mean_ratio("all_missing"), 4) << "\n";
    os << "Mean ratio, rest of the sample:   " << fixed(r.diagnostics->mean_ratio("rest"), 4) << "\n";
  }
  os << "\nConfiguration\n" << to_json(r.config, false).dump(2) << "\n";
}

/// Writes report.csv, report.txt, diagnostics.csv, estimates.csv and
/// config.json into `dir`.
inline void write_study_outputs(const ScenarioReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw ConfigError("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("report.csv");
    write_report_csv(r, f);
  }
  {
    auto f = open("report.txt");
    write_report_text(r, f);
  }
  {
    auto f = open("diagnostics.csv");
    if (r.diagnostics) write_diagnostics_csv(*r.diagnostics, f);
  }
  {
    auto f = open("estimates.csv");
    write_estimates_csv(r, f);
  }
  {
    auto f = open("config.json");
    f << to_json(r.config).dump(2) << "\n";
  }
}

// ---------------------------------------------------------------------------
// Two-step analysis of a single cohort.

struct VersionResult {
  FcsVersion version{};
  PooledEstimate pooled;
  double hr = 0.0, hr_low = 0.0, hr_high = 0.0;        // per unit log-marker
  double hr10 = 0.0, hr10_low = 0.0, hr10_high = 0.0;  // per 10% marker increase
  std::vector<double> estimates, variances;            // per multiple
  std::vector<std::string> warnings;
};

struct TwoStepReport {
  int n_subjects = 0;
  int n_events = 0;
  int omit_size = 0;
  std::size_t missing_cells = 0;
  std::vector<VersionResult> versions;  // standard, modified
  DiagnosticsTable diagnostics;
  double mean_ratio_all_missing = 0.0;
  double mean_ratio_rest = 0.0;
};

struct TwoStepOptions {
  ImputationSpec imputation;
  JointModelSpec joint;
  std::uint64_t seed = 20240607;
};

inline TwoStepReport run_two_step(const CohortDataset& input, const TwoStepOptions& opt) {
  validate(input);
  const CohortDataset cohort = derive_omit(input);
  TwoStepReport rep;
  rep.n_subjects = static_cast<int>(cohort.size());
  for (const auto& s : cohort.subjects) rep.n_events += s.event, rep.omit_size += s.omit;
  rep.missing_cells = cohort.missing_cells();
  if (rep.n_events == 0) throw IngestionError(0, "event", "no events in the cohort");

  std::vector<FcsRun> runs;
  std::optional<JointFit> single;
  for (FcsVersion v : {FcsVersion::standard, FcsVersion::modified}) {
    ImputationSpec spec = opt.imputation;
    spec.version = v;
    Rng rng = make_stream(opt.seed, {1});
    runs.push_back(run_fcs(cohort, spec, rng));
    VersionResult vr;
    vr.version = v;
    vr.warnings = runs.back().warnings;
    std::vector<JointFit> fits;
    if (rep.missing_cells == 0) {
      // Every multiple is the observed data: one fit stands for all.
      if (!single) single = fit_jm(cohort, opt.joint, false);
      fits.assign(spec.n_multiples, *single);
    } else {
      fits = detail::fit_multiples(runs.back(), opt.joint);
    }
    for (const auto& f : fits) {
      vr.estimates.push_back(f.alpha());
      vr.variances.push_back(f.alpha_se() * f.alpha_se());
    }
    vr.pooled = detail::pool_fits(fits, rep.n_subjects);
    const double k = std::log(1.1);
    vr.hr = std::exp(vr.pooled.q_bar);
    vr.hr_low = std::exp(vr.pooled.ci_low);
    vr.hr_high = std::exp(vr.pooled.ci_high);
    vr.hr10 = std::exp(k * vr.pooled.q_bar);
    vr.hr10_low = std::exp(k * vr.pooled.ci_low);
    vr.hr10_high = std::exp(k * vr.pooled.ci_high);
    rep.versions.push_back(std::move(vr));
  }
  rep.diagnostics = imputation_diagnostics(runs[0].multiples, runs[1].multiples);
  rep.mean_ratio_all_missing = rep.diagnostics.mean_ratio("all_missing");
  rep.mean_ratio_rest = rep.diagnostics.mean_ratio("rest");
  return rep;
}

inline TwoStepReport run_two_step_on_csv(const std::filesystem::path& csv, const TwoStepOptions& opt) {
  std::ifstream in(csv);
  if (!in) throw IngestionError(0, "", "cannot open " + csv.string());
  return run_two_step(read_wide_csv(in, csv.filename().string()), opt);
}

inline void write_two_step_csv(const TwoStepReport& r, std::ostream& os) {
  using detail::format_double;
  os << "version,log_hr,se,ci_low,ci_high,df,lambda,hr,hr_ci_low,hr_ci_high,hr_10pct,hr_10pct_ci_low,"
        "hr_10pct_ci_high\n";
  for (const auto& v : r.versions) {
    const auto& p = v.pooled;
    os << to_string(v.version) << ',' << format_double(p.q_bar) << ',' << format_double(p.se()) << ','
       << format_double(p.ci_low) << ',' << format_double(p.ci_high) << ','
       << (std::isfinite(p.df) ? format_double(p.df) : "Inf") << ',' << format_double(p.lambda) << ','
       << format_double(v.hr) << ',' << format_double(v.hr_low) << ',' << format_double(v.hr_high) << ','
       << format_double(v.hr10) << ',' << format_double(v.hr10_low) << ',' << format_double(v.hr10_high) << '\n';
  }
}

inline void write_two_step_text(const TwoStepReport& r, std::ostream& os) {
  using detail::fixed;
  using detail::pad;
  os << kVersion << "\n";
  os << "Subjects " << r.n_subjects << ", events " << r.n_events << ", all-missing subgroup " << r.omit_size
     << ", missing cells " << r.missing_cells << "\n\n";
  os << pad("FCS version", 13) << pad("logHR (95% CI)", 28) << pad("HR per 10% (95% CI)", 26) << "Lambda\n";
  for (const auto& v : r.versions) {
    const auto& p = v.pooled;
    os << pad(std::string(to_string(v.version)), 13)
       << pad(fixed(p.q_bar, 3) + " (" + fixed(p.ci_low, 3) + ", " + fixed(p.ci_high, 3) + ")", 28)
       << pad(fixed(v.hr10, 2) + " (" + fixed(v.hr10_low, 2) + ", " + fixed(v.hr10_high, 2) + ")", 26)
       << fixed(p.lambda, 3) << "\n";
  }
  os << "\nCompleted log-marker by period (averaged over multiples)\n";
  os << pad("Subgroup", 13) << pad("Period", 8) << pad("N", 8) << pad("Standard", 10) << pad("Modified", 10)
     << "Ratio\n";
  for (const auto& row : r.diagnostics.rows)
    os << pad(row.subgroup, 13) << pad(std::to_string(row.period), 8) << pad(std::to_string(row.n_subjects), 8)
       << pad(fixed(row.standard, 3), 10) << pad(fixed(row.modified, 3), 10) << fixed(row.ratio, 3) << "\n";
  os << "Mean ratio, all-missing subgroup: " << fixed(r.mean_ratio_all_missing, 4) << "\n";
  os << "Mean ratio, rest of the sample:   " << fixed(r.mean_ratio_rest, 4) << "\n";
  for (const auto& v : r.versions)
    for (const auto& w : v.warnings) os << "note (" << to_string(v.version) << "): " << w << "\n";
}

}  // namespace mnarjm
