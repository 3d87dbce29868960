// Desk-scale Monte Carlo acceptance gate: criteria 8-15.
// Usage: acceptance_mc [--out DIR] [--workers N]
// Runs the desk profile (n = 1000; 100 replications under H1, 400 under H0)
// and writes each study's reports under DIR.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include "mnarjm/mnarjm.hpp"

using namespace mnarjm;
namespace fs = std::filesystem;

namespace {

// Pinned targets.
constexpr double kStrongStdLo = -45.0, kStrongStdHi = -22.0;
constexpr double kStrongModLo = -18.0, kStrongModHi = 2.0;
constexpr double kStrongStdCoverMax = 0.65;
constexpr double kStrongModCoverMin = 0.88;
constexpr double kCmarPbLo = -14.0, kCmarPbHi = 0.0;
constexpr double kCmarCoverMin = 0.84;
constexpr double kRatioLo = 1.02, kRatioHi = 1.08;
constexpr double kCmarRatioLo = 0.99, kCmarRatioHi = 1.01;
constexpr double kType1StdMin = 0.05;
constexpr double kType1ModMax = 0.06;

int failures = 0;

void report(int id, bool pass, const std::string& detail) {
  std::cout << (pass ? "PASS" : "FAIL") << "  criterion " << id << ": " << detail << std::endl;
  failures += !pass;
}

std::string f(double v, int digits = 1) { return detail::fixed(v, digits); }

std::string report_bytes(const ScenarioReport& r) {
  std::ostringstream os;
  write_report_text(r, os);
  write_report_csv(r, os);
  write_estimates_csv(r, os);
  if (r.diagnostics) write_diagnostics_csv(*r.diagnostics, os);
  return os.str();
}

ScenarioReport run(MissingnessPreset scenario, Hypothesis h, std::vector<Method> methods, int workers,
                   const fs::path& out, const std::string& name) {
  StudyConfig c = StudyConfig::profile_defaults("desk", h);
  c.scenario = scenario;
  c.methods = std::move(methods);
  c.imputation.n_multiples = 5;
  c.imputation.n_iterations = 10;
  c.n_workers = workers;
  c.output_dir = (out / name).string();
  std::cerr << "running " << name << " (" << c.n_replications << " replications)" << std::endl;
  auto r = run_study(c);
  write_study_outputs(r, out / name);
  std::cout << "---- " << name << "\n";
  write_report_text(r, std::cout);
  std::cout << std::endl;
  return r;
}

const StudyMetrics* metrics(const ScenarioReport& r, Method m) {
  const auto* s = r.find(m);
  return s && s->metrics ? &*s->metrics : nullptr;
}

double pb(const StudyMetrics* m) { return m && m->percent_bias ? *m->percent_bias : std::nan(""); }
double cover(const StudyMetrics* m) { return m ? m->coverage : std::nan(""); }
double lambda(const StudyMetrics* m) { return m && m->mean_lambda ? *m->mean_lambda : std::nan(""); }
bool in(double v, double lo, double hi) { return v >= lo && v <= hi; }

}  // namespace

int main(int argc, char** argv) {
  fs::path out = "acceptance_mc_out";
  int rerun_workers = 2;
  for (int a = 1; a + 1 < argc; a += 2) {
    const std::string k = argv[a];
    if (k == "--out") out = argv[a + 1];
    if (k == "--workers") rerun_workers = std::stoi(argv[a + 1]);
  }
  fs::create_directories(out);
  const std::vector<Method> h1_methods = {Method::standard_jm, Method::standard_fcs_jm, Method::modified_fcs_jm};

  try {
    const auto cmar = run(MissingnessPreset::cmar, Hypothesis::h1, all_methods(), 1, out, "cmar_h1");
    const auto weak = run(MissingnessPreset::weak_nmar, Hypothesis::h1, all_methods(), 1, out, "weak_nmar_h1");
    const auto strong = run(MissingnessPreset::strong_nmar, Hypothesis::h1, all_methods(), 1, out, "strong_nmar_h1");
    const auto null = run(MissingnessPreset::strong_nmar, Hypothesis::h0,
                          {Method::standard_jm, Method::modified_fcs_jm}, 1, out, "strong_nmar_h0");
    const auto rerun =
        run(MissingnessPreset::cmar, Hypothesis::h1, all_methods(), rerun_workers, out, "cmar_h1_rerun");

    report(8, report_bytes(cmar) == report_bytes(rerun),
           "desk CMAR study with 1 and " + std::to_string(rerun_workers) + " workers: aggregate reports " +
               (report_bytes(cmar) == report_bytes(rerun) ? "byte-identical" : "differ"));

    {
      const double s = pb(metrics(strong, Method::standard_jm));
      const double sf = pb(metrics(strong, Method::standard_fcs_jm));
      const double m = pb(metrics(strong, Method::modified_fcs_jm));
      const bool ok = in(s, kStrongStdLo, kStrongStdHi) && in(m, kStrongModLo, kStrongModHi) &&
                      std::abs(m) < std::abs(s) && std::abs(m) < std::abs(sf);
      report(9, ok,
             "strong NMAR PB: standard JM " + f(s) + "% (in [-45,-22]), standard FCS " + f(sf) +
                 "%, modified FCS " + f(m) + "% (in [-18,2], smallest in magnitude)");
    }
    {
      const double s = cover(metrics(strong, Method::standard_jm));
      const double m = cover(metrics(strong, Method::modified_fcs_jm));
      report(10, s < kStrongStdCoverMax && m >= kStrongModCoverMin,
             "strong NMAR coverage: standard JM " + f(100 * s) + "% (< 65%), modified FCS " + f(100 * m) +
                 "% (>= 88%)");
    }
    {
      bool ok = true;
      std::string detail = "CMAR";
      for (Method me : h1_methods) {
        const double p = pb(metrics(cmar, me)), c = cover(metrics(cmar, me));
        ok = ok && in(p, kCmarPbLo, kCmarPbHi) && c >= kCmarCoverMin;
        detail += " " + std::string(to_string(me)) + " PB " + f(p) + "% cov " + f(100 * c) + "%;";
      }
      report(11, ok, detail + " (PB in [-14,0], coverage >= 84%)");
    }
    {
      const double s = cover(metrics(weak, Method::standard_jm));
      const double a = cover(metrics(weak, Method::standard_fcs_jm));
      const double b = cover(metrics(weak, Method::modified_fcs_jm));
      report(12, s < a && s < b,
             "weak NMAR coverage: standard JM " + f(100 * s) + "% below standard FCS " + f(100 * a) +
                 "% and modified FCS " + f(100 * b) + "%");
    }
    {
      bool ok = true;
      std::string detail = "mean lambda strong vs CMAR:";
      for (Method me : {Method::standard_fcs_jm, Method::modified_fcs_jm}) {
        const double ls = lambda(metrics(strong, me)), lc = lambda(metrics(cmar, me));
        ok = ok && ls > lc;
        detail += " " + std::string(to_string(me)) + " " + f(ls, 3) + " vs " + f(lc, 3) + ";";
      }
      report(13, ok, detail);
    }
    {
      const double rs = strong.diagnostics ? strong.diagnostics->mean_ratio("all_missing") : std::nan("");
      const double rc = cmar.diagnostics ? cmar.diagnostics->mean_ratio("all_missing") : std::nan("");
      report(14, in(rs, kRatioLo, kRatioHi) && in(rc, kCmarRatioLo, kCmarRatioHi),
             "all-missing subgroup modified/standard ratio: strong " + f(rs, 4) + " (in [1.02,1.08]), CMAR " +
                 f(rc, 4) + " (in [0.99,1.01])");
    }
    {
      const auto* s = metrics(null, Method::standard_jm);
      const auto* m = metrics(null, Method::modified_fcs_jm);
      const bool ok = s && m && s->type1_rate > kType1StdMin && m->type1_rate <= kType1ModMax;
      std::string detail = "strong NMAR H0 type-I:";
      if (s)
        detail += " standard JM " + f(100 * s->type1_rate) + "% (95% CI " + f(100 * s->type1_ci.low) + "-" +
                  f(100 * s->type1_ci.high) + "%, needs > 5%);";
      if (m)
        detail += " modified FCS " + f(100 * m->type1_rate) + "% (95% CI " + f(100 * m->type1_ci.low) + "-" +
                  f(100 * m->type1_ci.high) + "%, needs <= 6%)";
      report(15, ok, detail);
    }
  } catch (const std::exception& e) {
    std::cout << "FAIL  study run aborted: " << e.what() << std::endl;
    return 1;
  }
  std::cout << (failures ? "FAILED: " + std::to_string(failures) + " criteria" : std::string("ALL PASS")) << "\n";
  return failures ? 1 : 0;
}
