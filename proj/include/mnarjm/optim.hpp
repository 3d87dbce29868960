#pragma once

// BFGS minimisation with a strong-Wolfe line search, and a finite-difference
// Hessian built from an analytic gradient.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace mnarjm {

/// Returns f(x); writes the gradient when `grad` is non-null.
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd* grad)>;

struct OptimOptions {
  int max_iterations = 500;
  double rel_tol = 1e-8;   // relative change of the objective
  double grad_tol = 1e-5;  // max-norm of the gradient
};

struct OptimResult {
  Eigen::VectorXd x;
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd inverse_hessian;  // BFGS approximation at exit
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
  std::string message;
  std::vector<double> trace;  // objective after each accepted step
};

namespace detail {

struct LinePoint {
  double step, value, slope;
  Eigen::VectorXd grad;
};

// Nocedal & Wright, algorithms 3.5/3.6 with cubic interpolation in the zoom.
inline bool wolfe_search(const Objective& f, const Eigen::VectorXd& x, const Eigen::VectorXd& dir, double f0,
                         double g0, double step0, LinePoint& out, int& evals) {
  constexpr double c1 = 1e-4, c2 = 0.9;
  const int max_evals = 25;
  auto eval = [&](double a) {
    LinePoint p;
    p.step = a;
    p.grad.resize(x.size());
    p.value = f(x + a * dir, &p.grad);
    p.slope = p.grad.dot(dir);
    ++evals;
    return p;
  };
  auto interpolate = [](const LinePoint& lo, const LinePoint& hi) {
    const double d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (lo.step - hi.step);
    const double disc = d1 * d1 - lo.slope * hi.slope;
    double a = 0.5 * (lo.step + hi.step);
    if (disc >= 0.0 && std::isfinite(disc)) {
      const double d2 = std::copysign(std::sqrt(disc), hi.step - lo.step);
      a = hi.step - (hi.step - lo.step) * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    }
    const double lo_b = std::min(lo.step, hi.step), hi_b = std::max(lo.step, hi.step);
    const double margin = 0.1 * (hi_b - lo_b);
    if (!std::isfinite(a) || a < lo_b + margin || a > hi_b - margin) a = 0.5 * (lo_b + hi_b);
    return a;
  };
  auto zoom = [&](LinePoint lo, LinePoint hi, int& used) {
    while (used < max_evals) {
      LinePoint p = eval(interpolate(lo, hi));
      ++used;
      if (!std::isfinite(p.value) || p.value > f0 + c1 * p.step * g0 || p.value >= lo.value) {
        hi = p;
      } else {
        if (std::abs(p.slope) <= -c2 * g0) {
          out = p;
          return true;
        }
        if (p.slope * (hi.step - lo.step) >= 0.0) hi = lo;
        lo = p;
      }
      if (std::abs(hi.step - lo.step) < 1e-14 * std::max(1.0, lo.step)) break;
    }
    // settle for sufficient decrease
    if (lo.step > 0.0 && lo.value < f0) {
      out = lo;
      return true;
    }
    return false;
  };

  LinePoint prev{0.0, f0, g0, {}};
  double a = step0;
  int used = 0;
  for (int i = 0; used < max_evals; ++i) {
    LinePoint p = eval(a);
    ++used;
    if (!std::isfinite(p.value)) {
      // outside the domain: shrink towards the last good point
      a = prev.step + 0.25 * (a - prev.step);
      if (a - prev.step < 1e-16) return false;
      continue;
    }
    if (p.value > f0 + c1 * a * g0 || (i > 0 && p.value >= prev.value)) return zoom(prev, p, used);
    if (std::abs(p.slope) <= -c2 * g0) {
      out = p;
      return true;
    }
    if (p.slope >= 0.0) return zoom(p, prev, used);
    prev = p;
    a *= 2.0;
  }
  return false;
}

}  // namespace detail

/// Minimises `f` from `x0`. `inverse_hessian0`, when sized, seeds the BFGS matrix.
inline OptimResult minimize_bfgs(const Objective& f, Eigen::VectorXd x0, const OptimOptions& opt = {},
                                 Eigen::MatrixXd inverse_hessian0 = {}) {
  const int n = static_cast<int>(x0.size());
  OptimResult r;
  r.x = std::move(x0);
  r.gradient.resize(n);
  r.value = f(r.x, &r.gradient);
  r.evaluations = 1;
  if (!std::isfinite(r.value)) {
    r.message = "objective not finite at the starting point";
    return r;
  }
  Eigen::MatrixXd H = inverse_hessian0.rows() == n ? inverse_hessian0 : Eigen::MatrixXd::Identity(n, n);
  bool scaled = inverse_hessian0.rows() == n;
  if (r.gradient.lpNorm<Eigen::Infinity>() < opt.grad_tol) {
    r.converged = true;
    r.message = "gradient below tolerance at start";
    r.inverse_hessian = H;
    return r;
  }

  for (r.iterations = 0; r.iterations < opt.max_iterations;) {
    Eigen::VectorXd dir = -H * r.gradient;
    double g0 = r.gradient.dot(dir);
    if (!(g0 < 0.0)) {  // lost descent: restart from steepest descent
      H.setIdentity();
      scaled = false;
      dir = -r.gradient;
      g0 = r.gradient.dot(dir);
    }
    const double step0 = scaled ? 1.0 : std::min(1.0, 1.0 / std::max(1e-12, r.gradient.lpNorm<Eigen::Infinity>()));
    detail::LinePoint p;
    if (!detail::wolfe_search(f, r.x, dir, r.value, g0, step0, p, r.evaluations)) {
      // Stationary at working precision: the quadratic model promises less
      // than the relative tolerance.
      if (scaled && -0.5 * g0 <= opt.rel_tol * std::max(1.0, std::abs(r.value))) {
        r.converged = true;
        r.message = "converged (no further decrease at working precision)";
        break;
      }
      if (scaled) {  // one retry with a fresh matrix
        H.setIdentity();
        scaled = false;
        continue;
      }
      r.message = "line search failed";
      break;
    }
    ++r.iterations;
    const Eigen::VectorXd s = p.step * dir;
    const Eigen::VectorXd y = p.grad - r.gradient;
    const double f_old = r.value;
    r.x += s;
    r.value = p.value;
    r.gradient = p.grad;
    r.trace.push_back(r.value);

    const double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      if (!scaled) {
        H *= sy / y.squaredNorm();
        scaled = true;
      }
      const double rho = 1.0 / sy;
      const Eigen::VectorXd Hy = H * y;
      H += (rho * rho * y.dot(Hy) + rho) * s * s.transpose() - rho * (Hy * s.transpose() + s * Hy.transpose());
    }

    const double rel = std::abs(f_old - r.value) / std::max(1.0, std::abs(r.value));
    if (rel < opt.rel_tol && r.gradient.lpNorm<Eigen::Infinity>() < opt.grad_tol) {
      r.converged = true;
      r.message = "converged";
      break;
    }
  }
  if (!r.converged && r.message.empty()) r.message = "iteration limit reached";
  r.inverse_hessian = H;
  return r;
}

/// Central differences of an analytic gradient; symmetrised.
inline Eigen::MatrixXd numerical_hessian(const Objective& f, const Eigen::VectorXd& x, double rel_step = 1e-4) {
  const int n = static_cast<int>(x.size());
  Eigen::MatrixXd H(n, n);
  Eigen::VectorXd gp(n), gm(n);
  for (int i = 0; i < n; ++i) {
    const double h = rel_step * std::max(1.0, std::abs(x(i)));
    Eigen::VectorXd xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    f(xp, &gp);
    f(xm, &gm);
    H.col(i) = (gp - gm) / (2.0 * h);
  }
  return 0.5 * (H + H.transpose());
}

}  // namespace mnarjm
