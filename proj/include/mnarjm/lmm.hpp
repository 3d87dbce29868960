#pragma once

// Maximum likelihood for the linear mixed model
//   y_ij = x_ij' beta + z_ij' u_i + e_ij,  u_i ~ N(0, D),  e_ij ~ N(0, sigma^2)
// with x = (1, t, female, older) (terms selectable) and z = (1, t) or (1).
// beta is profiled out by GLS; the variance parameters are optimised on an
// unconstrained scale: log L11, L21 / L22, log L22, log sigma with D = L L'.

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <unordered_map>
#include <vector>

#include "mnarjm/cohort_data.hpp"
#include "mnarjm/errors.hpp"
#include "mnarjm/optim.hpp"

namespace mnarjm {

struct LmmTerms {
  bool time = true;
  bool female = true;
  bool older = true;
  bool random_slope = true;
};

struct LmmFit {
  // Fixed effects in the order (intercept, time, female, older); excluded terms are 0.
  Eigen::Vector4d beta = Eigen::Vector4d::Zero();
  double var_a = 0.0;
  double var_b = 0.0;
  double cov_ab = 0.0;
  double sigma2 = 0.0;
  double loglik = 0.0;
  bool converged = false;
  bool boundary = false;
  int n_subjects = 0;
  int n_obs = 0;
  int evaluations = 0;
  std::vector<std::string> warnings;

  Eigen::Matrix2d D() const {
    Eigen::Matrix2d d;
    d << var_a, cov_ab, cov_ab, var_b;
    return d;
  }
};

namespace detail {

// At most 4 fixed and 2 random effects: keep everything on the stack.
using SmallMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, 4, 4>;
using SmallVec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 4, 1>;

struct LmmSubjectStats {
  int n = 0;
  SmallMat xtx, ztz, ztx;
  SmallVec xty, zty;
  double yty = 0.0;
};

class LmmProblem {
 public:
  LmmProblem(const std::vector<LongRow>& rows, const LmmTerms& terms) : terms_(terms) {
    p_ = 1 + terms.time + terms.female + terms.older;
    q_ = terms.random_slope ? 2 : 1;
    std::unordered_map<int, std::size_t> index;
    for (const auto& r : rows) {
      auto [it, inserted] = index.emplace(r.id, stats_.size());
      if (inserted) {
        LmmSubjectStats s;
        s.xtx = SmallMat::Zero(p_, p_);
        s.ztz = SmallMat::Zero(q_, q_);
        s.ztx = SmallMat::Zero(q_, p_);
        s.xty = SmallVec::Zero(p_);
        s.zty = SmallVec::Zero(q_);
        stats_.push_back(std::move(s));
      }
      auto& s = stats_[it->second];
      const SmallVec x = fixed_row(r);
      SmallVec z(q_);
      z(0) = 1.0;
      if (q_ == 2) z(1) = r.time;
      s.n += 1;
      s.xtx += x * x.transpose();
      s.ztz += z * z.transpose();
      s.ztx += z * x.transpose();
      s.xty += x * r.log_marker;
      s.zty += z * r.log_marker;
      s.yty += r.log_marker * r.log_marker;
      n_obs_ += 1;
    }
  }

  int p() const { return p_; }
  int q() const { return q_; }
  int n_subjects() const { return static_cast<int>(stats_.size()); }
  int n_obs() const { return n_obs_; }

  SmallVec fixed_row(const LongRow& r) const {
    SmallVec x(p_);
    int c = 0;
    x(c++) = 1.0;
    if (terms_.time) x(c++) = r.time;
    if (terms_.female) x(c++) = r.female;
    if (terms_.older) x(c++) = r.older;
    return x;
  }

  SmallMat covariance(const Eigen::VectorXd& theta) const {
    SmallMat L = SmallMat::Zero(q_, q_);
    L(0, 0) = std::exp(theta(0));
    if (q_ == 2) {
      L(1, 1) = std::exp(theta(2));
      L(1, 0) = theta(1) * L(1, 1);
    }
    return L * L.transpose();
  }

  double sigma2(const Eigen::VectorXd& theta) const { return std::exp(2.0 * theta(theta.size() - 1)); }

  /// Marginal log-likelihood at (beta, D, sigma2). With `profile`, beta is the
  /// GLS estimate and is written to `beta_io` when given.
  double loglik(const SmallMat& D, double s2, Eigen::VectorXd* beta_io, bool profile) const {
    SmallMat A = SmallMat::Zero(p_, p_);
    SmallVec c = SmallVec::Zero(p_);
    double yvy = 0.0, logdet = 0.0;
    const SmallMat Iq = SmallMat::Identity(q_, q_);
    for (const auto& s : stats_) {
      const SmallMat M = Iq + s.ztz * D / s2;
      Eigen::PartialPivLU<SmallMat> lu(M);
      // K = D (I + Z'Z D / s2)^-1
      const SmallMat K = D * lu.inverse();
      A += s.xtx / s2 - s.ztx.transpose() * K * s.ztx / (s2 * s2);
      c += s.xty / s2 - s.ztx.transpose() * K * s.zty / (s2 * s2);
      yvy += s.yty / s2 - s.zty.dot(K * s.zty) / (s2 * s2);
      logdet += s.n * std::log(s2) + std::log(std::abs(lu.determinant()));
    }
    SmallVec beta;
    if (profile) {
      beta = A.ldlt().solve(c);
      if (beta_io) *beta_io = beta;
    } else {
      beta = *beta_io;
    }
    const double quad = yvy - 2.0 * beta.dot(c) + beta.dot(A * beta);
    return -0.5 * (n_obs_ * std::log(2.0 * std::numbers::pi) + logdet + quad);
  }

  /// Profiled log-likelihood and its gradient in the unconstrained variance
  /// parameters, from the expected complete-data score.
  double loglik_grad(const Eigen::VectorXd& theta, Eigen::VectorXd& grad) const {
    const SmallMat D = covariance(theta);
    const double s2 = sigma2(theta);
    Eigen::VectorXd beta_dyn;
    const double ll = loglik(D, s2, &beta_dyn, true);
    const SmallVec beta = beta_dyn;
    const SmallMat Iq = SmallMat::Identity(q_, q_);
    SmallMat Euu = SmallMat::Zero(q_, q_);
    double ee = 0.0;
    for (const auto& s : stats_) {
      const SmallMat K = D * (Iq + s.ztz * D / s2).inverse();  // posterior covariance of u
      const SmallVec zr = s.zty - s.ztx * beta;
      const double rr = s.yty - 2.0 * beta.dot(s.xty) + beta.dot(s.xtx * beta);
      const SmallVec u = K * zr / s2;
      Euu += u * u.transpose() + K;
      ee += rr - 2.0 * u.dot(zr) + u.dot(s.ztz * u) + (s.ztz * K).trace();
    }
    const SmallMat Dinv = D.inverse();
    const SmallMat G = 0.5 * Dinv * (Euu - n_subjects() * D) * Dinv;
    const double g_s2 = 0.5 * (ee / (s2 * s2) - n_obs_ / s2);
    SmallMat L = SmallMat::Zero(q_, q_);
    L(0, 0) = std::exp(theta(0));
    if (q_ == 2) {
      L(1, 1) = std::exp(theta(2));
      L(1, 0) = theta(1) * L(1, 1);
    }
    const SmallMat GL = 2.0 * G * L;
    grad.resize(theta.size());
    grad(0) = GL(0, 0) * L(0, 0);
    if (q_ == 2) {
      grad(1) = GL(1, 0) * L(1, 1);
      grad(2) = GL(1, 1) * L(1, 1) + GL(1, 0) * L(1, 0);
    }
    grad(theta.size() - 1) = 2.0 * s2 * g_s2;
    return ll;
  }

 private:
  LmmTerms terms_;
  int p_ = 4, q_ = 2, n_obs_ = 0;
  std::vector<LmmSubjectStats> stats_;
};

}  // namespace detail

/// Exact marginal log-likelihood of the full (intercept, time, female, older;
/// random intercept and slope) model at the given parameters.
inline double lmm_loglik(const std::vector<LongRow>& rows, const Eigen::Vector4d& beta, const Eigen::Matrix2d& D,
                         double sigma2) {
  detail::LmmProblem prob(rows, LmmTerms{});
  Eigen::VectorXd b = beta;
  return prob.loglik(detail::SmallMat(D), sigma2, &b, false);
}

inline LmmFit fit_lmm(const std::vector<LongRow>& rows, const LmmTerms& terms = {}, const OptimOptions& opt = {}) {
  detail::LmmProblem prob(rows, terms);
  if (prob.n_obs() <= prob.p() + 1) throw FitError("too few observations for the mixed model");

  // OLS start
  Eigen::MatrixXd xtx = Eigen::MatrixXd::Zero(prob.p(), prob.p());
  Eigen::VectorXd xty = Eigen::VectorXd::Zero(prob.p());
  double yty = 0.0;
  double tt = 0.0;
  for (const auto& r : rows) {
    const Eigen::VectorXd x = prob.fixed_row(r);
    xtx += x * x.transpose();
    xty += x * r.log_marker;
    yty += r.log_marker * r.log_marker;
    tt += r.time * r.time;
  }
  const Eigen::VectorXd b_ols = xtx.ldlt().solve(xty);
  const double rss = std::max(1e-12, yty - b_ols.dot(xty));
  const double var_total = rss / std::max(1, prob.n_obs() - prob.p());
  const double mean_t2 = std::max(1.0, tt / prob.n_obs());

  const int nt = prob.q() == 2 ? 4 : 2;
  Eigen::VectorXd theta(nt);
  if (prob.q() == 2) {
    theta << 0.5 * std::log(0.5 * var_total), 0.0, 0.5 * std::log(0.05 * var_total / mean_t2),
        0.5 * std::log(0.5 * var_total);
  } else {
    theta << 0.5 * std::log(0.5 * var_total), 0.5 * std::log(0.5 * var_total);
  }

  Objective obj = [&](const Eigen::VectorXd& th, Eigen::VectorXd* grad) {
    for (int i = 0; i < th.size(); ++i)
      if (th(i) < -40.0 || th(i) > 20.0) return std::numeric_limits<double>::infinity();
    if (!grad) return -prob.loglik(prob.covariance(th), prob.sigma2(th), nullptr, true);
    const double ll = prob.loglik_grad(th, *grad);
    *grad = -*grad;
    return -ll;
  };
  OptimOptions o = opt;
  const auto res = minimize_bfgs(obj, theta, o);

  LmmFit fit;
  fit.converged = res.converged;
  fit.evaluations = res.evaluations;
  fit.n_subjects = prob.n_subjects();
  fit.n_obs = prob.n_obs();
  const detail::SmallMat D = prob.covariance(res.x);
  fit.sigma2 = prob.sigma2(res.x);
  Eigen::VectorXd beta;
  fit.loglik = prob.loglik(D, fit.sigma2, &beta, true);
  int c = 0;
  fit.beta(0) = beta(c++);
  if (terms.time) fit.beta(1) = beta(c++);
  if (terms.female) fit.beta(2) = beta(c++);
  if (terms.older) fit.beta(3) = beta(c++);
  fit.var_a = D(0, 0);
  if (prob.q() == 2) {
    fit.cov_ab = D(0, 1);
    fit.var_b = D(1, 1);
  }
  const double scale = std::max(fit.sigma2, 1e-300);
  if (fit.var_a < 1e-8 * scale || (prob.q() == 2 && fit.var_b < 1e-8 * scale)) {
    fit.boundary = true;
    fit.warnings.push_back("variance component at the boundary (non-identifiable); boundary estimate returned");
  }
  if (!res.converged) fit.warnings.push_back("mixed model optimiser: " + res.message);
  return fit;
}

}  // namespace mnarjm
