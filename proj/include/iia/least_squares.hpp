// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "iia/common.hpp"

namespace iia {

inline constexpr double kRidgeConditionThreshold = 1e12;
inline constexpr double kRidgeLambda = 1e-8;

/// Feature vectors of one batch sample: features[j] is f_j.
using FeatureSet = std::vector<Vec>;

struct LeastSquaresResult {
  Vec coeffs;
  bool degenerate = false;  // every feature identically zero
  bool ridge = false;       // ridge fallback was used
  double condition = 1.0;   // condition number of the Jacobi-scaled Gram matrix
};

/// Gram matrix G_jk = sum_b <f_j, f_k> and right-hand side h_j = sum_b <f_j, y>,
/// accumulated in sample order.
inline void accumulate_normal_equations(std::span<const FeatureSet> features, std::span<const Vec> targets,
                                        Eigen::MatrixXd& gram, Vec& rhs) {
  if (features.size() != targets.size()) throw std::invalid_argument("least squares: feature/target batch size mismatch");
  if (features.empty()) throw std::invalid_argument("least squares: empty batch");
  const std::size_t n = features.front().size();
  gram = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  rhs = Vec::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t b = 0; b < features.size(); ++b) {
    const auto& f = features[b];
    if (f.size() != n) throw std::invalid_argument("least squares: feature count differs across samples");
    for (std::size_t j = 0; j < n; ++j) {
      if (f[j].size() != targets[b].size()) throw std::invalid_argument("least squares: feature/target dimension mismatch");
      const auto jj = static_cast<Eigen::Index>(j);
      rhs[jj] += f[j].dot(targets[b]);
      for (std::size_t k = 0; k <= j; ++k) {
        const double g = f[j].dot(f[k]);
        gram(jj, static_cast<Eigen::Index>(k)) += g;
      }
    }
  }
  for (Eigen::Index j = 0; j < gram.rows(); ++j)
    for (Eigen::Index k = 0; k < j; ++k) gram(k, j) = gram(j, k);
}

/// Solves G c = h for a symmetric positive semi-definite G.
///
/// Features with zero energy get coefficient 0. The rest are Jacobi-scaled;
/// if the scaled condition number exceeds 1e12 a ridge of
/// 1e-8 * trace / n is added before solving.
inline LeastSquaresResult solve_normal_equations(const Eigen::MatrixXd& gram, const Vec& rhs) {
  const Eigen::Index n = gram.rows();
  LeastSquaresResult out;
  out.coeffs = Vec::Zero(n);
  if (n == 0) return out;

  std::vector<Eigen::Index> active;
  for (Eigen::Index j = 0; j < n; ++j)
    if (gram(j, j) > 0.0) active.push_back(j);
  if (active.empty()) {
    out.degenerate = true;
    out.condition = std::numeric_limits<double>::infinity();
    return out;
  }

  const auto m = static_cast<Eigen::Index>(active.size());
  Eigen::MatrixXd g(m, m);
  Vec h(m), scale(m);
  for (Eigen::Index a = 0; a < m; ++a) scale[a] = 1.0 / std::sqrt(gram(active[a], active[a]));
  for (Eigen::Index a = 0; a < m; ++a) {
    h[a] = rhs[active[a]] * scale[a];
    for (Eigen::Index b = 0; b < m; ++b) g(a, b) = gram(active[a], active[b]) * scale[a] * scale[b];
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(g, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  out.condition = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
  if (out.condition > kRidgeConditionThreshold) {
    out.ridge = true;
    g.diagonal().array() += kRidgeLambda * g.trace() / static_cast<double>(m);
  }
  Vec c = g.ldlt().solve(h);
  for (Eigen::Index a = 0; a < m; ++a) out.coeffs[active[a]] = c[a] * scale[a];
  return out;
}

/// argmin_c sum_b || sum_j c_j f_j^(b) - y^(b) ||^2 via the normal equations.
inline LeastSquaresResult solve_least_squares(std::span<const FeatureSet> features, std::span<const Vec> targets) {
  Eigen::MatrixXd gram;
  Vec rhs;
  accumulate_normal_equations(features, targets, gram, rhs);
  return solve_normal_equations(gram, rhs);
}

/// gamma* = sum_b <Delta_b, y_b> / sum_b ||Delta_b||^2 (single feature).
inline double closed_form_gamma_r0(std::span<const Vec> deltas, std::span<const Vec> targets) {
  if (deltas.size() != targets.size() || deltas.empty())
    throw std::invalid_argument("closed_form_gamma_r0: batch size mismatch or empty batch");
  double num = 0.0, den = 0.0;
  for (std::size_t b = 0; b < deltas.size(); ++b) {
    num += deltas[b].dot(targets[b]);
    den += deltas[b].squaredNorm();
  }
  if (!(den > 0.0)) throw std::domain_error("closed_form_gamma_r0: zero denominator");
  return num / den;
}

/// sum_j c_j f_j
inline Vec combine_features(const FeatureSet& features, const Vec& coeffs, Eigen::Index dim) {
  if (static_cast<Eigen::Index>(features.size()) != coeffs.size())
    throw std::invalid_argument("combine_features: coefficient count does not match feature count");
  Vec out = Vec::Zero(dim);
  for (std::size_t j = 0; j < features.size(); ++j) out += coeffs[static_cast<Eigen::Index>(j)] * features[j];
  return out;
}

}  // namespace iia
