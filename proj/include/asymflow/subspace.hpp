#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <string>
#include <string_view>

#include "asymflow/error.hpp"
#include "asymflow/matrix.hpp"
#include "asymflow/rng.hpp"
#include "asymflow/svd.hpp"

namespace asymflow {

enum class Provenance { PCA, Procrustes, Random, Identity, Empty };

inline std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::PCA: return "pca";
    case Provenance::Procrustes: return "procrustes";
    case Provenance::Random: return "random";
    case Provenance::Identity: return "identity";
    case Provenance::Empty: return "empty";
  }
  return "unknown";
}

inline Provenance provenance_from_string(std::string_view s) {
  if (s == "pca") return Provenance::PCA;
  if (s == "procrustes") return Provenance::Procrustes;
  if (s == "random") return Provenance::Random;
  if (s == "identity") return Provenance::Identity;
  if (s == "empty") return Provenance::Empty;
  throw Error("unknown basis provenance '" + std::string(s) + "'");
}

/// Orthonormal D x r lift A and its projector P = A A^T.
///
/// Rank 0 and rank D are kept as explicit endpoints: the projector is then exactly the zero
/// map or the identity, with no rounding from the A A^T product.
class SubspaceBasis {
 public:
  static constexpr double kOrthonormalityTol = 1e-10;

  SubspaceBasis() = default;

  /// Validates A^T A = I to kOrthonormalityTol.
  SubspaceBasis(Matrix a, Provenance provenance) : a_(std::move(a)), provenance_(provenance) {
    if (a_.cols() > a_.rows()) throw DimensionError("SubspaceBasis: rank exceeds dimension");
    if (!a_.is_finite()) throw DomainError("SubspaceBasis: non-finite basis");
    const double err = orthonormality_error();
    if (err > kOrthonormalityTol) {
      throw DomainError("SubspaceBasis: columns not orthonormal (max |A^T A - I| = " +
                        std::to_string(err) + ")");
    }
  }

  static SubspaceBasis empty(std::size_t dim) {
    return SubspaceBasis(Matrix(dim, 0), Provenance::Empty);
  }
  static SubspaceBasis full(std::size_t dim) {
    return SubspaceBasis(Matrix::identity(dim), Provenance::Identity);
  }

  const Matrix& A() const noexcept { return a_; }
  Provenance provenance() const noexcept { return provenance_; }
  std::size_t dim() const noexcept { return a_.rows(); }
  std::size_t rank() const noexcept { return a_.cols(); }
  bool is_empty() const noexcept { return rank() == 0; }
  bool is_full() const noexcept { return rank() == dim(); }

  double orthonormality_error() const {
    const Matrix g = matmul_tn(a_, a_);
    double err = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i)
      for (std::size_t j = 0; j < g.cols(); ++j)
        err = std::max(err, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
    return err;
  }

  /// A^T v
  Vector reduce(VecView v) const {
    detail::require_same_size(v.size(), dim(), "SubspaceBasis::reduce");
    return matvec_t(a_, v);
  }

  /// A z
  Vector lift(VecView z) const {
    detail::require_same_size(z.size(), rank(), "SubspaceBasis::lift");
    return matvec(a_, z);
  }

  /// P v
  Vector project(VecView v) const {
    detail::require_same_size(v.size(), dim(), "project");
    if (is_empty()) return Vector(v.size(), 0.0);
    if (is_full()) return Vector(v.begin(), v.end());
    return matvec(a_, matvec_t(a_, v));
  }

  /// (I - P) v
  Vector project_complement(VecView v) const {
    detail::require_same_size(v.size(), dim(), "project_complement");
    if (is_empty()) return Vector(v.begin(), v.end());
    if (is_full()) return Vector(v.size(), 0.0);
    return sub(v, project(v));
  }

  /// Dense projector P (D x D).
  Matrix projector() const {
    if (is_full()) return Matrix::identity(dim());
    return matmul_nt(a_, a_);
  }

 private:
  Matrix a_;
  Provenance provenance_ = Provenance::Empty;
};

inline Vector project(const SubspaceBasis& basis, VecView v) { return basis.project(v); }

/// Pixel/latent lift scale; s = 1 means uncalibrated.
struct Calibration {
  double s = 1.0;

  Calibration() = default;
  explicit Calibration(double scale) : s(scale) {
    if (!(scale > 0.0) || !std::isfinite(scale)) {
      throw DomainError("Calibration: scale must be positive and finite");
    }
  }
  bool is_identity() const noexcept { return s == 1.0; }
};

namespace detail {

// Largest-magnitude entry of each column made positive (first index wins ties).
inline void canonicalize_signs(Matrix& a) {
  for (std::size_t j = 0; j < a.cols(); ++j) {
    std::size_t best = 0;
    double best_abs = -1.0;
    for (std::size_t i = 0; i < a.rows(); ++i) {
      if (std::abs(a(i, j)) > best_abs) {
        best_abs = std::abs(a(i, j));
        best = i;
      }
    }
    if (a(best, j) < 0.0)
      for (std::size_t i = 0; i < a.rows(); ++i) a(i, j) = -a(i, j);
  }
}

// Modified Gram-Schmidt, applied twice. Throws if a column collapses.
inline Matrix orthonormalize_columns(const Matrix& g) {
  std::vector<Vector> cols(g.cols());
  for (std::size_t j = 0; j < g.cols(); ++j) {
    Vector c = g.col(j);
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t k = 0; k < j; ++k) {
        const double p = dot(c, cols[k]);
        for (std::size_t i = 0; i < c.size(); ++i) c[i] -= p * cols[k][i];
      }
    }
    const double n = norm(c);
    if (!(n > 1e-12)) throw DomainError("orthonormalize: rank-deficient input");
    for (auto& x : c) x /= n;
    cols[j] = std::move(c);
  }
  Matrix out(g.rows(), g.cols());
  for (std::size_t j = 0; j < cols.size(); ++j) out.set_col(j, cols[j]);
  return out;
}

}  // namespace detail

/// Top-r left singular vectors of X (D x N), no mean subtraction.
inline SubspaceBasis fit_pca(const Matrix& x, std::size_t r) {
  if (r == 0) throw DomainError("fit_pca: rank must be >= 1");
  if (r > std::min(x.rows(), x.cols())) {
    throw DimensionError("fit_pca: rank " + std::to_string(r) + " exceeds min(D, N)");
  }
  const SvdResult f = svd(x);
  Matrix a = f.U.col_block(0, r);
  detail::canonicalize_signs(a);
  return SubspaceBasis(std::move(a), Provenance::PCA);
}

/// Variance fraction captured by the leading r singular values of X.
inline double captured_variance(const Matrix& x, const SubspaceBasis& basis) {
  double total = 0.0, kept = 0.0;
  for (std::size_t n = 0; n < x.cols(); ++n) {
    const Vector v = x.col(n);
    total += squared_norm(v);
    kept += squared_norm(basis.reduce(v));
  }
  return total > 0.0 ? kept / total : 0.0;
}

struct ProcrustesReport {
  Vector singular_values;                 // of X Z^T
  std::size_t degenerate_directions = 0;  // count with sigma_i / sigma_1 < 1e-10
};

/// Orthonormal A minimizing ||X - A Z||_F: A = U V^T from the compact SVD of X Z^T.
inline SubspaceBasis fit_procrustes(const Matrix& x, const Matrix& z,
                                    ProcrustesReport* report = nullptr) {
  detail::require_same_size(x.cols(), z.cols(), "fit_procrustes");
  if (z.rows() > x.rows()) throw DimensionError("fit_procrustes: latent dim exceeds pixel dim");
  if (z.rows() == 0) return SubspaceBasis::empty(x.rows());
  const Matrix cross = matmul_nt(x, z);  // D x d
  const SvdResult f = svd(cross);
  std::size_t degenerate = 0;
  const double s1 = f.S.front();
  for (double s : f.S)
    if (!(s1 > 0.0) || s / s1 < 1e-10) ++degenerate;
  if (degenerate > 0) {
    std::clog << "warning: fit_procrustes: " << degenerate
              << " degenerate direction(s) in X Z^T; solution is not unique\n";
  }
  if (report) {
    report->singular_values = f.S;
    report->degenerate_directions = degenerate;
  }
  Matrix a = matmul_nt(f.U, f.V);
  return SubspaceBasis(std::move(a), Provenance::Procrustes);
}

/// Gaussian D x r matrix orthonormalized by Gram-Schmidt.
inline SubspaceBasis fit_random(std::size_t dim, std::size_t r, Rng& rng) {
  if (r > dim) throw DimensionError("fit_random: rank exceeds dimension");
  if (r == 0) return SubspaceBasis::empty(dim);
  const Matrix g = sample_gaussian(rng, dim, r);
  return SubspaceBasis(detail::orthonormalize_columns(g), Provenance::Random);
}

/// s = ||A^T X||_F / ||Z||_F
inline Calibration estimate_scale(const Matrix& x, const Matrix& z, const SubspaceBasis& basis) {
  detail::require_same_size(x.rows(), basis.dim(), "estimate_scale");
  detail::require_same_size(x.cols(), z.cols(), "estimate_scale");
  const double zn = frobenius_norm(z);
  if (!(zn > 0.0)) throw DomainError("estimate_scale: latent matrix has zero norm");
  const double pn = frobenius_norm(matmul_tn(basis.A(), x));
  if (!(pn > 0.0)) throw DomainError("estimate_scale: projected pixels have zero norm");
  return Calibration(pn / zn);
}

/// Principal angles (radians, ascending) between span(A1) and span(A2).
inline Vector principal_angles(const Matrix& a1, const Matrix& a2) {
  detail::require_same_size(a1.rows(), a2.rows(), "principal_angles");
  const SvdResult f = svd(matmul_tn(a1, a2));
  Vector angles(f.S.size());
  for (std::size_t i = 0; i < f.S.size(); ++i)
    angles[i] = std::acos(std::clamp(f.S[i], -1.0, 1.0));
  return angles;
}

}  // namespace asymflow
