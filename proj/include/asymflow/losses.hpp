#pragma once

#include <algorithm>
#include <cmath>
#include <memory>

#include "asymflow/error.hpp"
#include "asymflow/matrix.hpp"
#include "asymflow/param.hpp"

namespace asymflow {

inline constexpr double kVrTimeFloor = 1e-3;

struct Interval {
  double lo = 0.0;
  double hi = 1.0;
};

struct LossWeights {
  double kappa = 0.3;    // schedule shift of omega_t
  double omega_p = 0.2;  // perceptual weight
  Interval lambda_clamp{0.0, 1.0};
};

/// ||u - u_hat||^2 for one sample.
inline double fm_loss(VecView u_hat, VecView u) {
  detail::require_same_size(u_hat.size(), u.size(), "fm_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    const double d = u[i] - u_hat[i];
    s += d * d;
  }
  return s;
}

/// d = x0 - stopgrad(x0_hat), dL = x0L - x0L_hat.
struct ResidualPair {
  Vector d;
  Vector dL;
};

inline ResidualPair make_residual_pair(VecView x0, VecView x0_hat, VecView x0L, VecView x0L_hat) {
  return {sub(x0, x0_hat), sub(x0L, x0L_hat)};
}

/// Unclamped <d, dL> / ||dL||^2; zero when dL vanishes.
inline double lambda_raw(const ResidualPair& pair) {
  detail::require_same_size(pair.d.size(), pair.dL.size(), "lambda_star");
  const double den = squared_norm(pair.dL);
  if (den == 0.0) return 0.0;
  return dot(pair.d, pair.dL) / den;
}

inline double lambda_star(const ResidualPair& pair, Interval clamp = {}) {
  return std::clamp(lambda_raw(pair), clamp.lo, clamp.hi);
}

/// omega_t = alpha_t^2 / (alpha_t^2 + (kappa sigma_t)^2).
inline double omega(double t, double kappa) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("omega: t outside [0, 1]");
  const double a = 1.0 - t;
  const double ks = kappa * t;
  return a * a / (a * a + ks * ks);
}

struct VrTerms {
  double loss = 0.0;
  double lambda = 0.0;
  double omega = 0.0;
  Vector residual;  // x0 - x0_hat - (1 - omega) lambda (x0L - x0L_hat)
};

/// Faded variance-reduced loss for one patch. `lambda_override` replaces the adaptive
/// coefficient (used when lambda is held fixed, e.g. for finite-difference checks).
inline VrTerms vr_terms(VecView x0, VecView x0_hat, VecView x0L, VecView x0L_hat, double t,
                        const LossWeights& w, const double* lambda_override = nullptr) {
  if (!(t >= kVrTimeFloor && t <= 1.0)) {
    throw DomainError("vr_loss: t below the trainer floor " + std::to_string(kVrTimeFloor));
  }
  const ResidualPair pair = make_residual_pair(x0, x0_hat, x0L, x0L_hat);
  VrTerms out;
  out.lambda = lambda_override ? *lambda_override : lambda_star(pair, w.lambda_clamp);
  out.omega = omega(t, w.kappa);
  const double c = (1.0 - out.omega) * out.lambda;
  out.residual.resize(pair.d.size());
  double s = 0.0;
  for (std::size_t i = 0; i < pair.d.size(); ++i) {
    out.residual[i] = pair.d[i] - c * pair.dL[i];
    s += out.residual[i] * out.residual[i];
  }
  out.loss = s / (t * t);
  return out;
}

inline double vr_loss(VecView x0, VecView x0_hat, VecView x0L, VecView x0L_hat, double t,
                      const LossWeights& w) {
  return vr_terms(x0, x0_hat, x0L, x0L_hat, t, w).loss;
}

/// Stand-in for a learned perceptual distance: nonnegative, zero on identical inputs,
/// with an analytic gradient in its first argument.
class PerceptualMetric {
 public:
  virtual ~PerceptualMetric() = default;
  virtual double distance(VecView a, VecView b) const = 0;
  /// d distance / d a
  virtual Vector gradient(VecView a, VecView b) const = 0;
};

/// Sum of squared differences over an average-pooled pyramid of a side x side grid.
/// Falls back to plain SSD when the vector is not a square grid.
class PyramidL2 final : public PerceptualMetric {
 public:
  explicit PyramidL2(std::size_t levels = 3) : levels_(levels) {}

  double distance(VecView a, VecView b) const override {
    detail::require_same_size(a.size(), b.size(), "PyramidL2");
    double total = 0.0;
    for (const Vector& lvl : pyramid(sub(a, b)))
      for (double v : lvl) total += v * v;
    return total;
  }

  Vector gradient(VecView a, VecView b) const override {
    detail::require_same_size(a.size(), b.size(), "PyramidL2");
    const auto levels = pyramid(sub(a, b));
    // Walk back from the coarsest level, spreading each pooled value over its 2x2 block.
    Vector back;
    for (std::size_t l = levels.size(); l-- > 0;) {
      Vector cur(levels[l].size());
      for (std::size_t i = 0; i < cur.size(); ++i) cur[i] = 2.0 * levels[l][i];
      if (!back.empty()) {
        const std::size_t side = side_of(cur.size());
        const std::size_t half = side / 2;
        for (std::size_t r = 0; r < side; ++r)
          for (std::size_t c = 0; c < side; ++c) cur[r * side + c] += 0.25 * back[(r / 2) * half + c / 2];
      }
      back = std::move(cur);
    }
    return back;
  }

  std::size_t levels() const noexcept { return levels_; }

 private:
  static std::size_t side_of(std::size_t n) {
    const auto s = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    return s * s == n ? s : 0;
  }

  std::vector<Vector> pyramid(Vector diff) const {
    std::vector<Vector> out;
    out.push_back(std::move(diff));
    std::size_t side = side_of(out.back().size());
    while (out.size() < levels_ && side >= 2 && side % 2 == 0) {
      const std::size_t half = side / 2;
      Vector pooled(half * half, 0.0);
      const Vector& prev = out.back();
      for (std::size_t r = 0; r < side; ++r)
        for (std::size_t c = 0; c < side; ++c) pooled[(r / 2) * half + c / 2] += 0.25 * prev[r * side + c];
      out.push_back(std::move(pooled));
      side = half;
    }
    return out;
  }

  std::size_t levels_;
};

/// omega_t lambda / sigma_t^2 * metric(x0_hat, x0).
inline double perceptual_loss(VecView x0_hat, VecView x0, double lambda, double t,
                              const LossWeights& w, const PerceptualMetric& metric) {
  if (!(t >= kVrTimeFloor && t <= 1.0)) throw DomainError("perceptual_loss: t below floor");
  if (lambda == 0.0) return 0.0;
  return omega(t, w.kappa) * lambda / (t * t) * metric.distance(x0_hat, x0);
}

/// L = L_VR + omega_P L_P.
inline double total_loss(double l_vr, double l_p, const LossWeights& w) {
  return l_vr + w.omega_p * l_p;
}

}  // namespace asymflow
