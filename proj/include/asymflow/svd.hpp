#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "asymflow/error.hpp"
#include "asymflow/matrix.hpp"

namespace asymflow {

/// Compact SVD: M (m x n) = U diag(S) V^T with U m x k, V n x k, k = min(m, n).
struct SvdResult {
  Matrix U;
  Vector S;
  Matrix V;
};

struct SvdOptions {
  // A column pair counts as orthogonal once |<w_i,w_j>| <= tol * |w_i| |w_j|.
  double tolerance = 1e-12;
  std::size_t max_sweeps = 60;
};

namespace detail {

// Extends `basis` (orthonormal columns, some possibly missing) to a full orthonormal set,
// trying standard basis vectors e_0, e_1, ... in order.
inline void complete_orthonormal(std::vector<Vector>& cols, std::vector<bool> valid) {
  const std::size_t m = cols.empty() ? 0 : cols.front().size();
  std::size_t candidate = 0;
  for (std::size_t j = 0; j < cols.size(); ++j) {
    if (valid[j]) continue;
    for (; candidate < m; ++candidate) {
      Vector e(m, 0.0);
      e[candidate] = 1.0;
      // Two Gram-Schmidt passes against every accepted column.
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t k = 0; k < cols.size(); ++k) {
          if (!valid[k]) continue;
          const double c = dot(e, cols[k]);
          for (std::size_t i = 0; i < m; ++i) e[i] -= c * cols[k][i];
        }
      }
      const double n = norm(e);
      if (n > 1e-6) {
        for (auto& x : e) x /= n;
        cols[j] = std::move(e);
        valid[j] = true;
        ++candidate;
        break;
      }
    }
  }
}

// One-sided (Hestenes) Jacobi for a tall matrix (m >= n), columns stored separately.
inline SvdResult jacobi_svd_tall(const Matrix& m_in, const SvdOptions& opt) {
  const std::size_t m = m_in.rows();
  const std::size_t n = m_in.cols();
  std::vector<Vector> w(n, Vector(m));
  for (std::size_t j = 0; j < n; ++j) w[j] = m_in.col(j);
  std::vector<Vector> v(n, Vector(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) v[j][j] = 1.0;

  std::size_t sweeps = 0;
  bool converged = n < 2;
  while (!converged) {
    if (sweeps == opt.max_sweeps) throw SvdConvergenceError(sweeps);
    ++sweeps;
    converged = true;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        const double* wi = w[i].data();
        const double* wj = w[j].data();
        for (std::size_t k = 0; k < m; ++k) {
          alpha += wi[k] * wi[k];
          beta += wj[k] * wj[k];
          gamma += wi[k] * wj[k];
        }
        if (gamma == 0.0 || std::abs(gamma) <= opt.tolerance * std::sqrt(alpha * beta)) continue;
        // Underflow guard: columns of vanishing norm are left alone.
        if (alpha == 0.0 || beta == 0.0) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t k = 0; k < m; ++k) {
          const double a = w[i][k];
          const double b = w[j][k];
          w[i][k] = c * a - s * b;
          w[j][k] = s * a + c * b;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double a = v[i][k];
          const double b = v[j][k];
          v[i][k] = c * a - s * b;
          v[j][k] = s * a + c * b;
        }
      }
    }
  }

  Vector sigma(n);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = norm(w[j]);
  const double smax = n ? *std::max_element(sigma.begin(), sigma.end()) : 0.0;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return sigma[a] > sigma[b]; });

  std::vector<Vector> ucols(n, Vector(m, 0.0));
  std::vector<bool> valid(n, false);
  SvdResult out{Matrix(m, n), Vector(n), Matrix(n, n)};
  for (std::size_t jj = 0; jj < n; ++jj) {
    const std::size_t j = order[jj];
    const double sj = sigma[j];
    out.S[jj] = sj;
    // Columns with negligible norm carry no direction; U is completed below.
    if (sj > 0.0 && sj > smax * 1e-15 * static_cast<double>(std::max(m, n))) {
      for (std::size_t k = 0; k < m; ++k) ucols[jj][k] = w[j][k] / sj;
      valid[jj] = true;
    }
    out.V.set_col(jj, v[j]);
  }
  complete_orthonormal(ucols, valid);
  for (std::size_t jj = 0; jj < n; ++jj) out.U.set_col(jj, ucols[jj]);
  return out;
}

}  // namespace detail

/// Compact SVD by cyclic one-sided Jacobi. Singular values come back nonincreasing.
/// Wide inputs are handled through the transpose.
inline SvdResult svd(const Matrix& m, const SvdOptions& opt = {}) {
  if (m.rows() == 0 || m.cols() == 0) throw DimensionError("svd: empty matrix");
  if (!m.is_finite()) throw DomainError("svd: non-finite input");
  if (m.rows() >= m.cols()) return detail::jacobi_svd_tall(m, opt);
  SvdResult t = detail::jacobi_svd_tall(m.transpose(), opt);
  return SvdResult{std::move(t.V), std::move(t.S), std::move(t.U)};
}

}  // namespace asymflow
