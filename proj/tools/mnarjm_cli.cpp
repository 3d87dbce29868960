// mnarjm: simulate cohorts, run simulation studies, analyze a CSV cohort.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "mnarjm/mnarjm.hpp"

namespace fs = std::filesystem;
using namespace mnarjm;

namespace {

struct StudyFlags {
  std::string config_path, profile = "desk", scenario, hypothesis, methods, out;
  std::optional<int> n_subjects, n_reps, multiples, nbiter, workers, quadrature;
  std::optional<std::uint64_t> seed;
};

std::vector<Method> parse_methods(const std::string& list) {
  if (list == "all") return all_methods();
  std::vector<Method> out;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(parse_method(item));
  return out;
}

StudyConfig resolve(const StudyFlags& f) {
  // profile defaults < config file < flags
  const Hypothesis h = f.hypothesis.empty() ? Hypothesis::h1 : parse_hypothesis(f.hypothesis);
  StudyConfig c;
  if (!f.config_path.empty()) {
    c = load_study_config(f.config_path);
    if (!f.hypothesis.empty()) c.hypothesis = h;
  } else {
    c = StudyConfig::profile_defaults(f.profile, h);
  }
  if (!f.scenario.empty()) c.scenario = parse_preset(f.scenario);
  if (f.n_subjects) c.n_subjects = *f.n_subjects;
  if (f.n_reps) c.n_replications = *f.n_reps;
  if (!f.methods.empty()) c.methods = parse_methods(f.methods);
  if (f.multiples) c.imputation.n_multiples = *f.multiples;
  if (f.nbiter) c.imputation.n_iterations = *f.nbiter;
  if (f.quadrature) c.joint.quadrature_order = *f.quadrature;
  if (f.seed) c.master_seed = *f.seed;
  if (f.workers) c.n_workers = *f.workers;
  if (!f.out.empty()) c.output_dir = f.out;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiple imputation and joint models for informatively missing markers"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "Generate one cohort and write it as wide CSV");
  std::string sim_scenario = "strong_nmar", sim_hypothesis = "h1", sim_out = "cohort_out";
  int sim_n = 1000;
  std::uint64_t sim_seed = 1;
  bool sim_long = false;
  sim->add_option("--scenario", sim_scenario, "cmar, weak_nmar or strong_nmar")->capture_default_str();
  sim->add_option("--hypothesis", sim_hypothesis, "h1 or h0")->capture_default_str();
  sim->add_option("--n-subjects", sim_n)->capture_default_str();
  sim->add_option("--seed", sim_seed)->capture_default_str();
  sim->add_option("--out", sim_out, "output directory")->capture_default_str();
  sim->add_flag("--long", sim_long, "also write the long layout");

  // study
  auto* study = app.add_subcommand("study", "Run a Monte Carlo study and write reports");
  StudyFlags sf;
  study->add_option("--config", sf.config_path, "JSON config; flags override it");
  study->add_option("--profile", sf.profile, "desk or paper")->capture_default_str();
  study->add_option("--scenario", sf.scenario, "cmar, weak_nmar or strong_nmar");
  study->add_option("--hypothesis", sf.hypothesis, "h1 or h0");
  study->add_option("--n-subjects", sf.n_subjects);
  study->add_option("--n-reps", sf.n_reps);
  study->add_option("--multiples", sf.multiples);
  study->add_option("--nbiter", sf.nbiter, "FCS sweeps per multiple");
  study->add_option("--methods", sf.methods, "comma list or 'all'");
  study->add_option("--quadrature", sf.quadrature, "Gauss-Hermite points per random effect");
  study->add_option("--seed", sf.seed);
  study->add_option("--workers", sf.workers);
  study->add_option("--out", sf.out, "output directory");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Two-step analysis of a wide CSV cohort");
  std::string an_input, an_out = "analysis_out";
  int an_multiples = 10, an_nbiter = 10, an_quadrature = 9;
  std::uint64_t an_seed = 1;
  analyze->add_option("--input", an_input, "wide CSV")->required();
  analyze->add_option("--multiples", an_multiples)->capture_default_str();
  analyze->add_option("--nbiter", an_nbiter)->capture_default_str();
  analyze->add_option("--quadrature", an_quadrature)->capture_default_str();
  analyze->add_option("--seed", an_seed)->capture_default_str();
  analyze->add_option("--out", an_out, "output directory")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sim) {
      ScenarioConfig cfg = ScenarioConfig::preset(parse_preset(sim_scenario), parse_hypothesis(sim_hypothesis), sim_n);
      Rng rng = make_stream(sim_seed, {0});
      const CohortDataset cohort = simulate_cohort(cfg, rng);
      fs::create_directories(sim_out);
      std::ofstream wide(fs::path(sim_out) / "cohort.csv", std::ios::binary);
      write_wide_csv(cohort, wide);
      if (sim_long) {
        std::ofstream lng(fs::path(sim_out) / "cohort_long.csv", std::ios::binary);
        write_long_csv(to_long_format(cohort, false), lng);
      }
      std::cout << "wrote " << cohort.size() << " subjects (" << cohort.missing_cells() << " missing cells) to "
                << (fs::path(sim_out) / "cohort.csv").string() << "\n";
    } else if (*study) {
      const StudyConfig cfg = resolve(sf);
      std::cerr << "running " << cfg.n_replications << " replications of " << to_string(cfg.scenario) << "/"
                << to_string(cfg.hypothesis) << " on " << cfg.n_workers << " worker(s)\n";
      const ScenarioReport report = run_study(cfg);
      write_study_outputs(report, cfg.output_dir);
      write_report_text(report, std::cout);
    } else if (*analyze) {
      TwoStepOptions opt;
      opt.imputation.n_multiples = an_multiples;
      opt.imputation.n_iterations = an_nbiter;
      opt.joint.quadrature_order = an_quadrature;
      opt.seed = an_seed;
      const TwoStepReport rep = run_two_step_on_csv(an_input, opt);
      fs::create_directories(an_out);
      {
        std::ofstream f(fs::path(an_out) / "analysis.csv", std::ios::binary);
        write_two_step_csv(rep, f);
      }
      {
        std::ofstream f(fs::path(an_out) / "analysis.txt", std::ios::binary);
        write_two_step_text(rep, f);
      }
      {
        std::ofstream f(fs::path(an_out) / "diagnostics.csv", std::ios::binary);
        write_diagnostics_csv(rep.diagnostics, f);
      }
      write_two_step_text(rep, std::cout);
    }
  } catch (const IngestionError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 3;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
