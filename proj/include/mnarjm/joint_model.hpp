#pragma once

// Shared-parameter joint model of a log-marker trajectory and a lagged hazard.
//
//   longitudinal:  W_i(t) = m_i(t) + e,   m_i(t) = b0 + a_i + (b1 + b_i) t + b2 female + b3 older
//   survival:      h_i(t) = h0(t) exp(g_f female + g_o older + alpha m_i(t - lag))
//
// (a_i, b_i) = L u_i with u_i ~ N(0, I) and D = L L', e ~ N(0, sigma^2); h0 is
// piecewise constant on unit periods after the risk-set entry time. Each
// subject's integral over u uses a product Gauss-Hermite rule centred at the
// posterior mode of u and scaled by the Cholesky factor of its posterior
// covariance. Working in u keeps the rule well behaved as D approaches
// singularity. The centring is held fixed between re-adaptations, so the
// log-likelihood and its analytic gradient are consistent with each other.
//
// Optimisation vector (index: meaning):
//   0..3 fixed effects, 4 log sigma, 5 log L11, 6 L21 / L22, 7 log L22 (D = L L'),
//   8 alpha, 9 g_female, 10 g_older, 11.. log h0 per piece.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mnarjm/cohort_data.hpp"
#include "mnarjm/errors.hpp"
#include "mnarjm/lmm.hpp"
#include "mnarjm/optim.hpp"
#include "mnarjm/quadrature.hpp"

namespace mnarjm {

struct JointModelSpec {
  int lag = 1;
  double risk_start = 1.0;     // subjects enter the risk set here
  int quadrature_order = 9;    // Gauss-Hermite points per random effect
  int legendre_order = 7;      // points per baseline piece for the cumulative hazard
  int max_marker_period = 0;   // last marker period used; 0 = n_periods - lag
  int max_adaptations = 20;
  OptimOptions optim{500, 1e-8, 1e-5};
};

struct JointParams {
  Eigen::Vector4d beta = Eigen::Vector4d::Zero();  // intercept, time, female, older
  double sigma2 = 1.0;
  Eigen::Matrix2d D = Eigen::Matrix2d::Identity();
  double alpha = 0.0;
  double gamma_female = 0.0;
  double gamma_older = 0.0;
  std::vector<double> baseline;  // hazard per piece

  static constexpr int kFixed = 11;

  int size() const { return kFixed + static_cast<int>(baseline.size()); }

  void check_domain() const {
    if (!(sigma2 > 0.0)) throw DomainError("residual variance must be positive");
    if (!(D(0, 0) > 0.0) || !(D(0, 0) * D(1, 1) - D(0, 1) * D(1, 0) > 0.0) || D(0, 1) != D(1, 0))
      throw DomainError("random-effects covariance must be symmetric positive definite");
    for (double h : baseline)
      if (!(h > 0.0)) throw DomainError("baseline hazard pieces must be positive");
  }

  Eigen::VectorXd pack() const {
    check_domain();
    Eigen::VectorXd x(size());
    x.head<4>() = beta;
    x(4) = 0.5 * std::log(sigma2);
    const double l11 = std::sqrt(D(0, 0));
    const double l21 = D(1, 0) / l11;
    const double l22 = std::sqrt(D(1, 1) - l21 * l21);
    x(5) = std::log(l11);
    x(6) = l21 / l22;
    x(7) = std::log(l22);
    x(8) = alpha;
    x(9) = gamma_female;
    x(10) = gamma_older;
    for (std::size_t k = 0; k < baseline.size(); ++k) x(kFixed + k) = std::log(baseline[k]);
    return x;
  }

  static JointParams unpack(const Eigen::VectorXd& x) {
    JointParams p;
    p.beta = x.head<4>();
    p.sigma2 = std::exp(2.0 * x(4));
    const double l11 = std::exp(x(5)), l22 = std::exp(x(7)), l21 = x(6) * l22;
    p.D << l11 * l11, l11 * l21, l11 * l21, l21 * l21 + l22 * l22;
    p.alpha = x(8);
    p.gamma_female = x(9);
    p.gamma_older = x(10);
    for (int k = kFixed; k < x.size(); ++k) p.baseline.push_back(std::exp(x(k)));
    return p;
  }
};

/// One subject as the joint model sees it.
struct JointSubject {
  int id = 0;
  double female = 0.0, older = 0.0;
  int event = 0;
  double time = 0.0;
  std::vector<double> t, y;  // measurement times and log-marker values
  // derived
  double sum_t = 0.0, sum_tt = 0.0;
  int piece_at_time = 0;  // baseline piece holding `time`
  int full_segments = 0;  // complete unit pieces of exposure before the last one
  double last_width = 0.0;
};

struct JointData {
  std::vector<JointSubject> subjects;
  int n_pieces = 1;
  double risk_start = 1.0;
  int lag = 1;
  int n_events = 0;
  int n_obs = 0;

  std::vector<LongRow> long_rows() const {
    std::vector<LongRow> rows;
    for (const auto& s : subjects)
      for (std::size_t j = 0; j < s.t.size(); ++j)
        rows.push_back({s.id, static_cast<int>(std::ceil(s.t[j])), s.t[j], s.y[j], static_cast<int>(s.female),
                        static_cast<int>(s.older)});
    return rows;
  }

  /// Uses every non-missing cell measured no later than the subject's event or
  /// censoring time, up to the configured last marker period.
  static JointData from_cohort(const CohortDataset& cohort, const JointModelSpec& spec, bool exclude_all_missing) {
    JointData d;
    d.lag = spec.lag;
    d.risk_start = spec.risk_start;
    const int J = cohort.grid.n_periods;
    d.n_pieces = std::max(1, static_cast<int>(std::ceil(J - spec.risk_start)));
    const int last = spec.max_marker_period > 0 ? std::min(spec.max_marker_period, J) : std::max(1, J - spec.lag);
    for (const auto& s : cohort.subjects) {
      if (exclude_all_missing && s.omit) continue;
      JointSubject js;
      js.id = s.id;
      js.female = s.female;
      js.older = s.older;
      js.event = s.event;
      js.time = s.time;
      for (int j = 1; j <= last; ++j) {
        const double tm = cohort.grid.measurement_time(j);
        if (!s.marker[j - 1] || tm > s.time) continue;
        js.t.push_back(tm);
        js.y.push_back(std::log(*s.marker[j - 1]));
      }
      d.add(std::move(js));
    }
    return d;
  }

  void add(JointSubject js) {
    js.sum_t = js.sum_tt = 0.0;
    for (double t : js.t) js.sum_t += t, js.sum_tt += t * t;
    const double u = js.time - risk_start;
    if (u <= 0.0) {
      js.piece_at_time = 0;
      js.full_segments = 0;
      js.last_width = 0.0;
    } else {
      const int segs = static_cast<int>(std::ceil(u));
      js.full_segments = segs - 1;
      js.last_width = u - js.full_segments;
      js.piece_at_time = std::min(segs - 1, n_pieces - 1);
    }
    n_events += js.event;
    n_obs += static_cast<int>(js.t.size());
    subjects.push_back(std::move(js));
  }
};

/// Posterior mode and Cholesky scale per subject.
struct QuadratureState {
  std::vector<Eigen::Vector2d> mode;   // in the standardised effects u
  std::vector<Eigen::Matrix2d> scale;  // lower triangular
  std::vector<double> log_det_scale;
};

/// AGHQ log-likelihood of the joint model with an analytic gradient.
class JointLikelihood {
 public:
  JointLikelihood(const JointData& data, const JointModelSpec& spec)
      : data_(data), spec_(spec), rule_(spec.quadrature_order), gl_(gauss_legendre_unit(spec.legendre_order)) {
    if (data.subjects.empty()) throw FitError("no subjects to fit");
    n_par_ = JointParams::kFixed + data.n_pieces;
    const std::size_t n = data.subjects.size();
    state_.mode.assign(n, Eigen::Vector2d::Zero());
    state_.scale.assign(n, Eigen::Matrix2d::Identity());
    state_.log_det_scale.assign(n, 0.0);
    node_val_.resize(rule_.nodes.size());
    node_grad_.resize(n_par_, rule_.nodes.size());
  }

  int n_params() const { return n_par_; }
  const QuadratureState& state() const { return state_; }

  /// Re-centres every subject's quadrature at its posterior mode under `theta`.
  void adapt(const Eigen::VectorXd& theta) {
    const Params p(theta, data_.n_pieces);
    for (std::size_t i = 0; i < data_.subjects.size(); ++i) {
      const auto& s = data_.subjects[i];
      const SubjectStats st = subject_stats(s, p);
      Eigen::Vector2d u = state_.mode[i];
      NodeOut out;
      eval_node(s, st, p, u, out, false, true);
      if (!std::isfinite(out.value)) {
        u.setZero();
        eval_node(s, st, p, u, out, false, true);
      }
      for (int it = 0; it < 100; ++it) {
        const Eigen::Vector2d step = (-out.hess).ldlt().solve(out.ugrad);
        double scale = 1.0;
        NodeOut trial;
        bool accepted = false;
        for (int h = 0; h < 40; ++h) {
          eval_node(s, st, p, u + scale * step, trial, false, true);
          if (std::isfinite(trial.value) && trial.value >= out.value - 1e-12 * std::abs(out.value)) {
            accepted = true;
            break;
          }
          scale *= 0.5;
        }
        if (!accepted) break;
        u += scale * step;
        out = trial;
        if (step.cwiseAbs().maxCoeff() * scale < 1e-10) break;
      }
      Eigen::Matrix2d cov = (-out.hess).inverse();
      Eigen::LLT<Eigen::Matrix2d> llt(cov);
      if (llt.info() != Eigen::Success || !cov.allFinite()) throw FitError("posterior curvature not negative definite");
      state_.mode[i] = u;
      state_.scale[i] = llt.matrixL();
      state_.log_det_scale[i] = std::log(state_.scale[i](0, 0)) + std::log(state_.scale[i](1, 1));
    }
  }

  /// Log-likelihood at `theta` under the current quadrature state. `scores`
  /// receives per-subject gradients as columns.
  double value(const Eigen::VectorXd& theta, Eigen::VectorXd* grad = nullptr,
               Eigen::MatrixXd* scores = nullptr) const {
    Eigen::VectorXd local;
    if (scores && !grad) grad = &local;
    if (scores) scores->setZero(n_par_, data_.subjects.size());
    for (int k = 0; k < theta.size(); ++k)
      if (!std::isfinite(theta(k))) return -std::numeric_limits<double>::infinity();
    const Params p(theta, data_.n_pieces);
    if (grad) grad->setZero(n_par_);
    double total = 0.0;
    const std::size_t nq = rule_.nodes.size();
    NodeOut out;
    out.grad.resize(n_par_);
    for (std::size_t i = 0; i < data_.subjects.size(); ++i) {
      const auto& s = data_.subjects[i];
      const SubjectStats st = subject_stats(s, p);
      double vmax = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < nq; ++k) {
        const Eigen::Vector2d u = state_.mode[i] + state_.scale[i] * rule_.nodes[k];
        eval_node(s, st, p, u, out, grad != nullptr, false);
        node_val_[k] = rule_.log_weights[k] + out.value;
        if (grad) node_grad_.col(k) = out.grad;
        vmax = std::max(vmax, node_val_[k]);
      }
      if (!std::isfinite(vmax)) return -std::numeric_limits<double>::infinity();
      double sum = 0.0;
      for (std::size_t k = 0; k < nq; ++k) sum += std::exp(node_val_[k] - vmax);
      total += vmax + std::log(sum) + state_.log_det_scale[i];
      if (grad) {
        subject_grad_.setZero(n_par_);
        for (std::size_t k = 0; k < nq; ++k) subject_grad_ += (std::exp(node_val_[k] - vmax) / sum) * node_grad_.col(k);
        *grad += subject_grad_;
        if (scores) scores->col(i) = subject_grad_;
      }
    }
    return total;
  }

  /// Survival part only, with each subject's random effects plugged in at the
  /// current quadrature centre. Used for starting values.
  double plugin_survival(const Eigen::VectorXd& theta, Eigen::VectorXd* grad) const {
    const Params p(theta, data_.n_pieces);
    if (grad) grad->setZero(n_par_);
    double total = 0.0;
    NodeOut out;
    out.grad.resize(n_par_);
    for (std::size_t i = 0; i < data_.subjects.size(); ++i) {
      const auto& s = data_.subjects[i];
      total += survival_term(s, p, p.L * state_.mode[i], out, grad != nullptr);
      if (grad) *grad += out.grad;
    }
    return total;
  }

 private:
  struct Params {
    Eigen::Vector4d beta;
    double sigma2, log_sigma;
    double l11, rho, l22, log_l11, log_l22;
    Eigen::Matrix2d L;
    double alpha, gf, go;
    std::vector<double> h0, log_h0;

    Params(const Eigen::VectorXd& x, int n_pieces) {
      beta = x.head<4>();
      log_sigma = x(4);
      sigma2 = std::exp(2.0 * log_sigma);
      log_l11 = x(5);
      rho = x(6);
      log_l22 = x(7);
      l11 = std::exp(log_l11);
      l22 = std::exp(log_l22);
      L << l11, 0.0, rho * l22, l22;
      alpha = x(8);
      gf = x(9);
      go = x(10);
      for (int k = 0; k < n_pieces; ++k) {
        log_h0.push_back(x(JointParams::kFixed + k));
        h0.push_back(std::exp(log_h0.back()));
      }
    }
  };

  struct SubjectStats {
    double n, se, see, set;  // sums of e, e^2, e t with e = y - fixed part
  };

  struct NodeOut {
    double value = 0.0;
    Eigen::VectorXd grad;
    Eigen::Vector2d ugrad;
    Eigen::Matrix2d hess;
  };

  SubjectStats subject_stats(const JointSubject& s, const Params& p) const {
    SubjectStats st{static_cast<double>(s.t.size()), 0.0, 0.0, 0.0};
    const double fixed = p.beta(0) + p.beta(2) * s.female + p.beta(3) * s.older;
    for (std::size_t j = 0; j < s.t.size(); ++j) {
      const double e = s.y[j] - fixed - p.beta(1) * s.t[j];
      st.se += e;
      st.see += e * e;
      st.set += e * s.t[j];
    }
    return st;
  }

  // Cumulative-hazard moments for eta(s) = c + d s over the subject's exposure.
  struct HazardMoments {
    double H = 0.0, Hs = 0.0, Hss = 0.0;
    double per_piece[64] = {};
  };

  void hazard_moments(const JointSubject& s, const Params& p, double c, double d, HazardMoments& hm) const {
    const int K = data_.n_pieces;
    std::fill(hm.per_piece, hm.per_piece + K, 0.0);
    if (s.last_width <= 0.0) return;
    const double rs = data_.risk_start;
    const std::size_t ng = gl_.size();
    double A0 = 0.0, A1 = 0.0, A2 = 0.0;
    if (s.full_segments > 0)
      for (std::size_t g = 0; g < ng; ++g) {
        const double u = gl_.nodes[g];
        const double e = gl_.weights[g] * std::exp(d * u);
        A0 += e;
        A1 += e * u;
        A2 += e * u * u;
      }
    const double ed = std::exp(d);
    double E = std::exp(c + d * rs);
    for (int seg = 0; seg < s.full_segments; ++seg) {
      const double lo = rs + seg;
      const double i0 = E * A0, i1 = E * (lo * A0 + A1), i2 = E * (lo * lo * A0 + 2.0 * lo * A1 + A2);
      const int k = std::min(seg, K - 1);
      const double h = p.h0[k];
      hm.per_piece[k] += h * i0;
      hm.H += h * i0;
      hm.Hs += h * i1;
      hm.Hss += h * i2;
      E *= ed;
    }
    const double w = s.last_width;
    const double lo = rs + s.full_segments;
    double B0 = 0.0, B1 = 0.0, B2 = 0.0;
    for (std::size_t g = 0; g < ng; ++g) {
      const double u = w * gl_.nodes[g];
      const double e = gl_.weights[g] * std::exp(d * u);
      B0 += e;
      B1 += e * u;
      B2 += e * u * u;
    }
    const double i0 = w * E * B0, i1 = w * E * (lo * B0 + B1), i2 = w * E * (lo * lo * B0 + 2.0 * lo * B1 + B2);
    const int k = std::min(s.full_segments, K - 1);
    const double h = p.h0[k];
    hm.per_piece[k] += h * i0;
    hm.H += h * i0;
    hm.Hs += h * i1;
    hm.Hss += h * i2;
  }

  // log of [event density or survival] given b; fills out.grad (theta) if requested.
  double survival_term(const JointSubject& s, const Params& p, const Eigen::Vector2d& b, NodeOut& out,
                       bool want_grad, HazardMoments* moments = nullptr) const {
    const double lag = data_.lag;
    const double mb = p.beta(1) + b(1);
    const double mc = p.beta(0) + b(0) + p.beta(2) * s.female + p.beta(3) * s.older - mb * lag;
    const double d = p.alpha * mb;
    const double c = p.gf * s.female + p.go * s.older + p.alpha * mc;
    HazardMoments local;
    HazardMoments& hm = moments ? *moments : local;
    hazard_moments(s, p, c, d, hm);
    const double delta = s.event;
    const double value = delta * (p.log_h0[s.piece_at_time] + c + d * s.time) - hm.H;
    if (want_grad) {
      auto& g = out.grad;
      g.setZero(n_par_);
      const double dH = delta - hm.H;
      g(0) = p.alpha * dH;
      g(1) = p.alpha * (delta * (s.time - lag) - (hm.Hs - lag * hm.H));
      g(2) = p.alpha * s.female * dH;
      g(3) = p.alpha * s.older * dH;
      g(8) = delta * (mc + mb * s.time) - (mc * hm.H + mb * hm.Hs);
      g(9) = s.female * dH;
      g(10) = s.older * dH;
      for (int k = 0; k < data_.n_pieces; ++k) g(JointParams::kFixed + k) = -hm.per_piece[k];
      g(JointParams::kFixed + s.piece_at_time) += delta;
    }
    return value;
  }

  // Log joint density of the subject's data and u; theta-gradient at fixed u
  // and, on request, u-derivatives for the mode search.
  void eval_node(const JointSubject& s, const SubjectStats& st, const Params& p, const Eigen::Vector2d& u,
                 NodeOut& out, bool want_grad, bool want_uderivs) const {
    const Eigen::Vector2d b = p.L * u;
    const double a = b(0), bs = b(1);
    const double sr = st.se - st.n * a - bs * s.sum_t;
    const double srt = st.set - a * s.sum_t - bs * s.sum_tt;
    const double srr = st.see - 2.0 * a * st.se - 2.0 * bs * st.set + st.n * a * a + 2.0 * a * bs * s.sum_t +
                       bs * bs * s.sum_tt;
    const double s2 = p.sigma2;
    const double lon = -0.5 * st.n * (std::log(2.0 * std::numbers::pi) + 2.0 * p.log_sigma) - 0.5 * srr / s2;
    const double pri = -std::log(2.0 * std::numbers::pi) - 0.5 * u.squaredNorm();

    HazardMoments hm;
    const double sur = survival_term(s, p, b, out, want_grad, &hm);
    out.value = lon + pri + sur;
    if (!want_grad && !want_uderivs) return;

    // data part of the gradient in b
    const double lag = data_.lag;
    const double delta = s.event;
    const double h01 = hm.Hs - lag * hm.H;
    const double gb0 = sr / s2 + p.alpha * (delta - hm.H);
    const double gb1 = srt / s2 + p.alpha * (delta * (s.time - lag) - h01);
    if (want_grad) {
      auto& g = out.grad;
      g(0) += sr / s2;
      g(1) += srt / s2;
      g(2) += s.female * sr / s2;
      g(3) += s.older * sr / s2;
      g(4) = -st.n + srr / s2;
      // through b = L u
      g(5) = gb0 * a;
      g(6) = gb1 * p.l22 * u(0);
      g(7) = gb1 * bs;
    }
    if (want_uderivs) {
      const double a2 = p.alpha * p.alpha;
      const double h11 = hm.Hss - 2.0 * lag * hm.Hs + lag * lag * hm.H;
      Eigen::Matrix2d hb;
      hb(0, 0) = -st.n / s2 - a2 * hm.H;
      hb(0, 1) = hb(1, 0) = -s.sum_t / s2 - a2 * h01;
      hb(1, 1) = -s.sum_tt / s2 - a2 * h11;
      out.ugrad = p.L.transpose() * Eigen::Vector2d(gb0, gb1) - u;
      out.hess = p.L.transpose() * hb * p.L - Eigen::Matrix2d::Identity();
    }
  }

  const JointData& data_;
  JointModelSpec spec_;
  ProductRule2 rule_;
  QuadratureRule gl_;
  int n_par_ = 0;
  QuadratureState state_;
  mutable std::vector<double> node_val_;
  mutable Eigen::MatrixXd node_grad_;
  mutable Eigen::VectorXd subject_grad_;
};

/// Log-likelihood at `params`, with the quadrature adapted at `params`.
inline double jm_loglik(const JointParams& params, const JointData& data, const JointModelSpec& spec = {}) {
  params.check_domain();
  if (static_cast<int>(params.baseline.size()) != data.n_pieces)
    throw ConfigError("baseline hazard has " + std::to_string(params.baseline.size()) + " pieces, data needs " +
                      std::to_string(data.n_pieces));
  JointLikelihood lik(data, spec);
  const Eigen::VectorXd x = params.pack();
  lik.adapt(x);
  return lik.value(x);
}

struct JointFit {
  JointParams params;
  Eigen::VectorXd theta;       // optimisation scale
  Eigen::MatrixXd covariance;  // optimisation scale, inverse observed information
  // Standard errors on the natural scale (delta method for variances and hazards).
  JointParams se;
  double loglik = 0.0;
  bool converged = false;
  int n_subjects = 0;
  int n_events = 0;
  int iterations = 0;
  int evaluations = 0;
  int adaptations = 0;
  std::vector<std::string> warnings;

  double alpha() const { return params.alpha; }
  double alpha_se() const { return se.alpha; }
  int n_params() const { return static_cast<int>(theta.size()); }

  /// Flat key/value listing.
  std::vector<std::pair<std::string, double>> report() const {
    std::vector<std::pair<std::string, double>> r;
    const char* bnames[] = {"beta_intercept", "beta_time", "beta_female", "beta_older"};
    for (int k = 0; k < 4; ++k) {
      r.emplace_back(bnames[k], params.beta(k));
      r.emplace_back(std::string(bnames[k]) + "_se", se.beta(k));
    }
    r.emplace_back("sigma2", params.sigma2);
    r.emplace_back("sigma2_se", se.sigma2);
    r.emplace_back("var_a", params.D(0, 0));
    r.emplace_back("var_a_se", se.D(0, 0));
    r.emplace_back("cov_ab", params.D(0, 1));
    r.emplace_back("cov_ab_se", se.D(0, 1));
    r.emplace_back("var_b", params.D(1, 1));
    r.emplace_back("var_b_se", se.D(1, 1));
    r.emplace_back("alpha", params.alpha);
    r.emplace_back("alpha_se", se.alpha);
    r.emplace_back("gamma_female", params.gamma_female);
    r.emplace_back("gamma_female_se", se.gamma_female);
    r.emplace_back("gamma_older", params.gamma_older);
    r.emplace_back("gamma_older_se", se.gamma_older);
    for (std::size_t k = 0; k < params.baseline.size(); ++k) {
      r.emplace_back("baseline_" + std::to_string(k + 1), params.baseline[k]);
      r.emplace_back("baseline_" + std::to_string(k + 1) + "_se", se.baseline[k]);
    }
    r.emplace_back("loglik", loglik);
    r.emplace_back("converged", converged ? 1.0 : 0.0);
    r.emplace_back("n_subjects", n_subjects);
    r.emplace_back("n_events", n_events);
    r.emplace_back("iterations", iterations);
    return r;
  }
};

namespace detail {

inline JointParams natural_scale_se(const Eigen::VectorXd& x, const Eigen::MatrixXd& cov) {
  const int n = static_cast<int>(x.size());
  const JointParams p = JointParams::unpack(x);
  // Jacobian rows: beta(4), sigma2, var_a, cov_ab, var_b, alpha, gf, go, h0...
  const int m = n;
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(m, n);
  for (int k = 0; k < 4; ++k) G(k, k) = 1.0;
  G(4, 4) = 2.0 * p.sigma2;
  const double l11 = std::exp(x(5)), rho = x(6), l22 = std::exp(x(7));
  const double cab = l11 * l22 * rho, vb = l22 * l22 * (1.0 + rho * rho);
  G(5, 5) = 2.0 * l11 * l11;                                    // var_a
  G(6, 5) = cab, G(6, 6) = l11 * l22, G(6, 7) = cab;            // cov_ab
  G(7, 6) = 2.0 * l22 * l22 * rho, G(7, 7) = 2.0 * vb;          // var_b
  for (int k = 8; k < JointParams::kFixed; ++k) G(k, k) = 1.0;
  for (int k = JointParams::kFixed; k < n; ++k) G(k, k) = p.baseline[k - JointParams::kFixed];
  const Eigen::VectorXd v = (G * cov * G.transpose()).diagonal().cwiseMax(0.0).cwiseSqrt();
  JointParams se;
  se.beta = v.head<4>();
  se.sigma2 = v(4);
  se.D << v(5), v(6), v(6), v(7);
  se.alpha = v(8);
  se.gamma_female = v(9);
  se.gamma_older = v(10);
  for (int k = JointParams::kFixed; k < n; ++k) se.baseline.push_back(v(k));
  return se;
}

}  // namespace detail

// L22 below this multiple of |row 2 of L| counts as a singular D; the boundary
// refit pins L22 at kPinnedL22 * L11.
inline constexpr double kSingularL22 = 1e-3;
inline constexpr double kPinnedL22 = 1e-7;
// log hazard standing in for zero on a piece without events.
inline constexpr double kLogZeroHazard = -30.0;

/// Maximum-likelihood fit. With `exclude_all_missing`, subjects flagged as
/// all-missing are dropped first. Throws FitError on failure. Two boundary
/// cases are fitted rather than rejected, each with a warning: a baseline piece
/// without events, and a rank-one D.
inline JointFit fit_jm(const JointData& data, const JointModelSpec& spec = {}) {
  if (data.n_events == 0) throw FitError("no events in the data");
  if (data.n_obs < 6) throw FitError("too few marker observations");
  JointFit fit;
  fit.n_subjects = static_cast<int>(data.subjects.size());
  fit.n_events = data.n_events;

  // Starting values: mixed model for the marker, crude piecewise rates.
  const LmmFit lmm = fit_lmm(data.long_rows());
  for (const auto& w : lmm.warnings) fit.warnings.push_back("start: " + w);
  JointParams start;
  start.beta = lmm.beta;
  start.sigma2 = std::max(lmm.sigma2, 1e-8);
  {
    const double va = std::max(lmm.var_a, 1e-3 * start.sigma2);
    const double vb = std::max(lmm.var_b, 1e-5 * start.sigma2);
    const double lim = 0.95 * std::sqrt(va * vb);
    const double cab = std::clamp(lmm.cov_ab, -lim, lim);
    start.D << va, cab, cab, vb;
  }
  std::vector<double> ev(data.n_pieces, 0.0), expo(data.n_pieces, 0.0);
  for (const auto& s : data.subjects) {
    for (int seg = 0; seg < s.full_segments; ++seg) expo[std::min(seg, data.n_pieces - 1)] += 1.0;
    expo[std::min(s.full_segments, data.n_pieces - 1)] += s.last_width;
    if (s.event) ev[s.piece_at_time] += 1.0;
  }
  for (int k = 0; k < data.n_pieces; ++k) start.baseline.push_back(std::max(ev[k], 0.5) / std::max(expo[k], 1.0));

  JointLikelihood lik(data, spec);
  Eigen::VectorXd x = start.pack();
  const int np = lik.n_params();

  // A piece with no events has a zero-hazard MLE; hold it there.
  std::vector<int> empty_pieces;
  for (int k = 0; k < data.n_pieces; ++k) {
    if (ev[k] > 0.0) continue;
    empty_pieces.push_back(JointParams::kFixed + k);
    x(JointParams::kFixed + k) = kLogZeroHazard;
    fit.warnings.push_back("baseline piece " + std::to_string(k + 1) + " has no events; hazard held at zero");
  }

  // Null survival fit (alpha = 0), then alpha with random effects at their modes.
  lik.adapt(x);
  {
    std::vector<int> free_null = {9, 10};
    std::vector<int> free_plugin = {8, 9, 10};
    for (int k = JointParams::kFixed; k < np; ++k)
      if (ev[k - JointParams::kFixed] > 0.0) free_null.push_back(k), free_plugin.push_back(k);
    for (const auto* free : {&free_null, &free_plugin}) {
      Objective obj = [&](const Eigen::VectorXd& z, Eigen::VectorXd* g) {
        Eigen::VectorXd full = x;
        for (std::size_t k = 0; k < free->size(); ++k) full((*free)[k]) = z(k);
        Eigen::VectorXd gf;
        const double v = lik.plugin_survival(full, g ? &gf : nullptr);
        if (g) {
          g->resize(free->size());
          for (std::size_t k = 0; k < free->size(); ++k) (*g)(k) = -gf((*free)[k]);
        }
        return std::isfinite(v) ? -v : std::numeric_limits<double>::infinity();
      };
      Eigen::VectorXd z(free->size());
      for (std::size_t k = 0; k < free->size(); ++k) z(k) = x((*free)[k]);
      const auto r = minimize_bfgs(obj, z, OptimOptions{200, 1e-10, 1e-6});
      if (std::isfinite(r.value))
        for (std::size_t k = 0; k < free->size(); ++k) x((*free)[k]) = r.x(k);
    }
  }

  // Outer loop over a linear embedding x = E z + c of the free parameters:
  // adapt the nodes, run BFGS, repeat until the log-likelihood settles.
  struct Outer {
    Eigen::VectorXd z;
    OptimResult res;
    double loglik = -std::numeric_limits<double>::infinity();
    int iterations = 0, evaluations = 0, adaptations = 0;
    bool converged = false;
  };
  auto run_outer = [&](const Eigen::MatrixXd& E, const Eigen::VectorXd& c, Eigen::VectorXd z) {
    const int nz = static_cast<int>(z.size());
    Objective negll = [&](const Eigen::VectorXd& zz, Eigen::VectorXd* g) {
      Eigen::VectorXd gx;
      const double v = lik.value(E * zz + c, g ? &gx : nullptr);
      if (g) *g = -(E.transpose() * gx);
      return std::isfinite(v) ? -v : std::numeric_limits<double>::infinity();
    };
    Outer o;
    Eigen::MatrixXd Hinv;
    int remaining = spec.optim.max_iterations;
    for (; o.adaptations < spec.max_adaptations && remaining > 0;) {
      lik.adapt(E * z + c);
      ++o.adaptations;
      const double at_adapt = -negll(z, nullptr);
      if (o.adaptations == 1) {
        // Outer product of subject scores as the first curvature estimate.
        Eigen::MatrixXd scores;
        lik.value(E * z + c, nullptr, &scores);
        const Eigen::MatrixXd bhhh = E.transpose() * scores * scores.transpose() * E;
        Eigen::LDLT<Eigen::MatrixXd> f(bhhh);
        if (f.info() == Eigen::Success && (f.vectorD().array() > 0.0).all())
          Hinv = f.solve(Eigen::MatrixXd::Identity(nz, nz));
      }
      if (o.adaptations > 1 && o.res.converged &&
          std::abs(at_adapt - o.loglik) < spec.optim.rel_tol * std::max(1.0, std::abs(at_adapt))) {
        o.converged = true;
        break;
      }
      OptimOptions opt = spec.optim;
      opt.max_iterations = remaining;
      o.res = minimize_bfgs(negll, z, opt, Hinv);
      o.iterations += o.res.iterations;
      o.evaluations += o.res.evaluations;
      remaining -= std::max(1, o.res.iterations);
      if (!std::isfinite(o.res.value)) break;
      z = o.res.x;
      Hinv = o.res.inverse_hessian;
      o.loglik = -o.res.value;
      if (!o.res.converged && o.res.iterations == 0) break;
    }
    o.z = z;
    return o;
  };
  auto diagnostics = [](const Outer& o, double alpha) {
    std::ostringstream os;
    os << "loglik=" << o.loglik << " iterations=" << o.iterations << " adaptations=" << o.adaptations
       << " optimizer=\"" << o.res.message << "\" grad_max="
       << (o.res.gradient.size() ? o.res.gradient.lpNorm<Eigen::Infinity>() : 0.0)
       << " evaluations=" << o.res.evaluations << " alpha=" << alpha;
    return os.str();
  };
  // Covariance on the full scale from the observed information in z.
  auto information = [&](const Eigen::MatrixXd& E, const Eigen::VectorXd& c,
                         const Eigen::VectorXd& z) -> std::optional<Eigen::MatrixXd> {
    Objective negll = [&](const Eigen::VectorXd& zz, Eigen::VectorXd* g) {
      Eigen::VectorXd gx;
      const double v = lik.value(E * zz + c, g ? &gx : nullptr);
      if (g) *g = -(E.transpose() * gx);
      return -v;
    };
    const Eigen::MatrixXd H = numerical_hessian(negll, z);
    Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 0.0).all()) return std::nullopt;
    return E * ldlt.solve(Eigen::MatrixXd::Identity(z.size(), z.size())) * E.transpose();
  };

  // Coordinates in `pinned` are held at their value in `at`. With l22 > 0,
  // L22 is held there too and L21 replaces L21 / L22 as the free coordinate.
  struct Embedding {
    Eigen::MatrixXd E;
    Eigen::VectorXd c, z;
  };
  auto embed = [&](const Eigen::VectorXd& at, std::vector<int> pinned, double l22) {
    if (l22 > 0.0) pinned.push_back(7);
    std::vector<int> free;
    for (int k = 0; k < np; ++k)
      if (std::find(pinned.begin(), pinned.end(), k) == pinned.end()) free.push_back(k);
    Embedding e;
    e.E = Eigen::MatrixXd::Zero(np, free.size());
    e.c = at;
    e.z.resize(free.size());
    for (int k : free) e.c(k) = 0.0;
    if (l22 > 0.0) e.c(7) = std::log(l22);
    for (std::size_t j = 0; j < free.size(); ++j) {
      const int k = free[j];
      const bool ratio = l22 > 0.0 && k == 6;
      e.E(k, j) = ratio ? 1.0 / l22 : 1.0;
      e.z(j) = ratio ? at(6) * std::exp(at(7)) : at(k);
    }
    return e;
  };

  const Embedding main = embed(x, empty_pieces, 0.0);
  Outer o = run_outer(main.E, main.c, main.z);
  std::optional<Eigen::MatrixXd> cov;
  if (o.converged) cov = information(main.E, main.c, o.z);
  o.z = main.E * o.z + main.c;
  fit.iterations = o.iterations;
  fit.evaluations = o.evaluations;
  fit.adaptations = o.adaptations;

  // Singular D: the slope effect collapses onto the intercept (L22 -> 0, so
  // |corr| -> 1 or var_b -> 0). Refit with L22 pinned near zero and L21 free.
  const double l22_end = std::exp(o.z(7));
  if (!cov && l22_end < kSingularL22 * std::hypot(std::exp(o.z(5)), o.z(6) * l22_end)) {
    const Embedding bnd = embed(o.z, empty_pieces, kPinnedL22 * std::exp(o.z(5)));
    Outer b = run_outer(bnd.E, bnd.c, bnd.z);
    fit.iterations += b.iterations;
    fit.evaluations += b.evaluations;
    fit.adaptations += b.adaptations;
    if (b.converged) {
      if (auto bc = information(bnd.E, bnd.c, b.z)) {
        b.z = bnd.E * b.z + bnd.c;
        o = std::move(b);
        cov = std::move(bc);
        fit.warnings.push_back("random-effects covariance at the boundary (rank one); "
                               "standard errors are conditional on it");
      }
    }
  }

  if (!o.converged) throw FitError("joint model did not converge", diagnostics(o, o.z(8)));
  if (!cov) throw FitError("observed information is not positive definite", diagnostics(o, o.z(8)));
  fit.converged = true;
  fit.theta = o.z;
  fit.params = JointParams::unpack(o.z);
  fit.loglik = lik.value(o.z);
  fit.covariance = *cov;
  fit.se = detail::natural_scale_se(o.z, fit.covariance);
  return fit;
}

inline JointFit fit_jm(const CohortDataset& cohort, const JointModelSpec& spec, bool exclude_all_missing) {
  return fit_jm(JointData::from_cohort(cohort, spec, exclude_all_missing), spec);
}

}  // namespace mnarjm
