#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "test_support.hpp"

using namespace mnarjm;

namespace {

StudyConfig small_study() {
  StudyConfig c = StudyConfig::profile_defaults("desk", Hypothesis::h1);
  c.n_subjects = 250;
  c.n_replications = 3;
  c.scenario = MissingnessPreset::weak_nmar;
  c.imputation.n_multiples = 2;
  c.imputation.n_iterations = 2;
  c.joint.quadrature_order = 3;
  c.master_seed = 99;
  return c;
}

std::string report_text(const ScenarioReport& r) {
  std::ostringstream os;
  write_report_text(r, os);
  write_report_csv(r, os);
  write_estimates_csv(r, os);
  return os.str();
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mnarjm_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(StudyConfig, ProfilesAndValidation) {
  const auto desk = StudyConfig::profile_defaults("desk", Hypothesis::h0);
  EXPECT_EQ(desk.n_subjects, 1000);
  EXPECT_EQ(desk.n_replications, 400);
  const auto paper = StudyConfig::profile_defaults("paper", Hypothesis::h1);
  EXPECT_EQ(paper.n_subjects, 4000);
  EXPECT_EQ(paper.n_replications, 400);
  EXPECT_EQ(StudyConfig::profile_defaults("paper", Hypothesis::h0).n_replications, 1600);
  EXPECT_THROW(StudyConfig::profile_defaults("huge", Hypothesis::h1), ConfigError);
  auto c = desk;
  c.methods.clear();
  EXPECT_THROW(c.validate(), ConfigError);
  c = desk;
  c.imputation.n_multiples = 1;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_DOUBLE_EQ(desk.truth(), 0.0);
  EXPECT_DOUBLE_EQ(paper.truth(), 1.4);
}

TEST(StudyConfig, JsonRoundTrip) {
  auto c = small_study();
  c.methods = {Method::standard_jm, Method::modified_fcs_jm};
  c.imputation.include_post_event_values = false;
  c.joint.optim.rel_tol = 1e-9;
  c.n_workers = 3;
  const auto dir = temp_dir("json");
  const auto path = dir / "config.json";
  std::ofstream(path) << to_json(c).dump(2);
  const auto back = load_study_config(path.string());
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  std::ofstream(dir / "bad.json") << "{\"n_subjects\": \"many\"}";
  EXPECT_THROW(load_study_config((dir / "bad.json").string()), ConfigError);
  std::ofstream(dir / "broken.json") << "{";
  EXPECT_THROW(load_study_config((dir / "broken.json").string()), ConfigError);
  EXPECT_THROW(load_study_config((dir / "absent.json").string()), ConfigError);
}

TEST(Methods, NamesRoundTrip) {
  for (Method m : all_methods()) EXPECT_EQ(parse_method(to_string(m)), m);
  EXPECT_THROW(parse_method("bogus"), ConfigError);
}

TEST(Replication, DeterministicForSeedAndIndex) {
  const auto c = small_study();
  const auto a = run_replication(c, 1);
  const auto b = run_replication(c, 1);
  ASSERT_EQ(a.records.size(), 4u);
  for (std::size_t k = 0; k < a.records.size(); ++k) {
    EXPECT_TRUE(a.records[k].ok) << a.records[k].error;
    EXPECT_EQ(a.records[k].estimate.estimate, b.records[k].estimate.estimate);
    EXPECT_EQ(a.records[k].estimate.ci_high, b.records[k].estimate.ci_high);
  }
  const auto other = run_replication(c, 2);
  EXPECT_NE(a.records[0].estimate.estimate, other.records[0].estimate.estimate);
  ASSERT_TRUE(a.diagnostics.has_value());
  // the MI methods carry a fraction of missing information, the single fits do not
  EXPECT_FALSE(a.records[0].estimate.lambda.has_value());
  EXPECT_TRUE(a.records[3].estimate.lambda.has_value());
}

TEST(Replication, MethodSubsetMatchesFullRun) {
  auto c = small_study();
  const auto full = run_replication(c, 0);
  c.methods = {Method::modified_fcs_jm};
  const auto sub = run_replication(c, 0);
  ASSERT_EQ(sub.records.size(), 1u);
  EXPECT_EQ(sub.records[0].method, Method::modified_fcs_jm);
  EXPECT_EQ(sub.records[0].estimate.estimate, full.records[3].estimate.estimate);
  EXPECT_FALSE(sub.diagnostics.has_value());
}

TEST(Study, SingleReplicationAndFiles) {
  auto c = small_study();
  c.n_replications = 1;
  c.methods = {Method::standard_jm, Method::fully_observed_jm};
  const auto r = run_study(c);
  ASSERT_EQ(r.methods.size(), 2u);
  for (const auto& m : r.methods) {
    EXPECT_EQ(m.n_ok, 1);
    ASSERT_TRUE(m.metrics.has_value());
    EXPECT_EQ(m.metrics->empirical_variance, 0.0);
  }
  const auto dir = temp_dir("single");
  write_study_outputs(r, dir);
  for (const char* f : {"report.csv", "report.txt", "estimates.csv", "config.json"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
}

TEST(Study, ReportDoesNotDependOnWorkerCount) {
  auto c = small_study();
  c.methods = {Method::standard_jm, Method::standard_fcs_jm, Method::modified_fcs_jm};
  c.n_workers = 1;
  const auto one = run_study(c);
  c.n_workers = 3;
  c.output_dir = "elsewhere";
  const auto three = run_study(c);
  EXPECT_EQ(report_text(one), report_text(three));
  EXPECT_EQ(one.replications.size(), 3u);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(one.replications[k].index, k);
}

TEST(TwoStep, CsvAnalysisRoundTrip) {
  const auto cohort = testing_support::simulated(MissingnessPreset::strong_nmar, Hypothesis::h1, 300, 71);
  const auto dir = temp_dir("analyze");
  {
    std::ofstream out(dir / "cohort.csv");
    write_wide_csv(cohort, out);
  }
  TwoStepOptions opt;
  opt.imputation.n_multiples = 2;
  opt.imputation.n_iterations = 2;
  opt.joint.quadrature_order = 3;
  const auto r = run_two_step_on_csv(dir / "cohort.csv", opt);
  EXPECT_EQ(r.n_subjects, 300);
  ASSERT_EQ(r.versions.size(), 2u);
  EXPECT_EQ(r.versions[0].version, FcsVersion::standard);
  EXPECT_EQ(r.versions[1].version, FcsVersion::modified);
  for (const auto& v : r.versions) {
    EXPECT_EQ(v.estimates.size(), 2u);
    EXPECT_NEAR(v.hr10, std::exp(std::log(1.1) * v.pooled.q_bar), 1e-12);
    EXPECT_LT(v.hr10_low, v.hr10);
    EXPECT_GT(v.hr10_high, v.hr10);
  }
  const auto again = run_two_step_on_csv(dir / "cohort.csv", opt);
  EXPECT_EQ(again.versions[1].pooled.q_bar, r.versions[1].pooled.q_bar);
  std::ostringstream text, csv;
  write_two_step_text(r, text);
  write_two_step_csv(r, csv);
  EXPECT_NE(text.str().find("all-missing"), std::string::npos);
  const std::string rows = csv.str();
  EXPECT_EQ(std::count(rows.begin(), rows.end(), '\n'), 3);
}

TEST(TwoStep, NoMissingCellsGivesIdenticalVersions) {
  const auto cohort =
      fully_observed(testing_support::simulated(MissingnessPreset::cmar, Hypothesis::h1, 300, 72));
  TwoStepOptions opt;
  opt.imputation.n_multiples = 3;
  opt.imputation.n_iterations = 2;
  opt.joint.quadrature_order = 3;
  const auto r = run_two_step(cohort, opt);
  EXPECT_EQ(r.missing_cells, 0u);
  EXPECT_EQ(r.versions[0].pooled.q_bar, r.versions[1].pooled.q_bar);
  EXPECT_EQ(r.versions[0].pooled.t, r.versions[1].pooled.t);
  EXPECT_DOUBLE_EQ(r.versions[0].pooled.lambda, 0.0);
}

TEST(TwoStep, InputProblemsAreReported) {
  auto cohort = testing_support::simulated(MissingnessPreset::cmar, Hypothesis::h1, 50, 73);
  for (auto& s : cohort.subjects) s.event = 0, s.time = 7.0, s.event_period = 7;
  EXPECT_THROW(run_two_step(cohort, TwoStepOptions{}), IngestionError);
  const auto dir = temp_dir("bad_csv");
  std::ofstream(dir / "bad.csv") << "id,female,older\n1,0,1\n";
  EXPECT_THROW(run_two_step_on_csv(dir / "bad.csv", TwoStepOptions{}), IngestionError);
  EXPECT_THROW(run_two_step_on_csv(dir / "missing.csv", TwoStepOptions{}), IngestionError);
}
