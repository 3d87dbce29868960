#pragma once

// Gauss rules from the Golub-Welsch eigenproblem.

#include <Eigen/Dense>
#include <cmath>
#include <numbers>
#include <vector>

#include "mnarjm/errors.hpp"

namespace mnarjm {

struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  std::size_t size() const { return nodes.size(); }
};

/// Gauss-Hermite rule for the standard normal weight:
/// sum_k w_k f(x_k) ~ E[f(Z)], exact for polynomials up to degree 2n-1.
inline QuadratureRule gauss_hermite(int n) {
  if (n < 1) throw ConfigError("quadrature order must be positive");
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) jacobi(i, i - 1) = jacobi(i - 1, i) = std::sqrt(static_cast<double>(i));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  QuadratureRule rule;
  for (int k = 0; k < n; ++k) {
    rule.nodes.push_back(eig.eigenvalues()(k));
    const double v = eig.eigenvectors()(0, k);
    rule.weights.push_back(v * v);
  }
  // Exact symmetry about zero; odd moments then vanish to rounding.
  for (int k = 0; k < n / 2; ++k) {
    const int m = n - 1 - k;
    const double x = 0.5 * (rule.nodes[m] - rule.nodes[k]);
    const double w = 0.5 * (rule.weights[m] + rule.weights[k]);
    rule.nodes[k] = -x;
    rule.nodes[m] = x;
    rule.weights[k] = rule.weights[m] = w;
  }
  if (n % 2) rule.nodes[n / 2] = 0.0;
  double total = 0.0;
  for (double w : rule.weights) total += w;
  for (double& w : rule.weights) w /= total;
  return rule;
}

/// Gauss-Legendre rule on [0, 1]: sum_k w_k f(u_k) ~ int_0^1 f(u) du.
inline QuadratureRule gauss_legendre_unit(int n) {
  if (n < 1) throw ConfigError("quadrature order must be positive");
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i < n; ++i) {
    const double b = i / std::sqrt(4.0 * i * i - 1.0);
    jacobi(i, i - 1) = jacobi(i - 1, i) = b;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
  QuadratureRule rule;
  for (int k = 0; k < n; ++k) {
    rule.nodes.push_back(0.5 * (eig.eigenvalues()(k) + 1.0));
    const double v = eig.eigenvectors()(0, k);
    rule.weights.push_back(v * v);  // 2 v^2 on [-1,1], halved for [0,1]
  }
  return rule;
}

/// Tensor-product Gauss-Hermite rule in two dimensions.
struct ProductRule2 {
  std::vector<Eigen::Vector2d> nodes;
  std::vector<double> log_weights;  // log(w) + |z|^2 / 2 + log(2 pi): converts to Lebesgue measure

  explicit ProductRule2(int order) {
    const auto gh = gauss_hermite(order);
    for (std::size_t i = 0; i < gh.size(); ++i)
      for (std::size_t j = 0; j < gh.size(); ++j) {
        nodes.emplace_back(gh.nodes[i], gh.nodes[j]);
        const double z2 = gh.nodes[i] * gh.nodes[i] + gh.nodes[j] * gh.nodes[j];
        log_weights.push_back(std::log(gh.weights[i] * gh.weights[j]) + 0.5 * z2 +
                              std::log(2.0 * std::numbers::pi));
      }
  }
};

}  // namespace mnarjm
