#pragma once

// Linear flow schedule, AsymFlow targets and the exact velocity recovery.

#include <algorithm>
#include <cmath>
#include <string>

#include "asymflow/error.hpp"
#include "asymflow/matrix.hpp"
#include "asymflow/subspace.hpp"

namespace asymflow {

inline constexpr double kDefaultSigmaMin = 0.04;

struct Schedule {
  double alpha;
  double sigma;
};

/// alpha_t = 1 - t, sigma_t = t.
inline Schedule schedule(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw DomainError("schedule: t outside [0, 1]");
  return {1.0 - t, t};
}

struct FlowSample {
  Vector x0;
  Vector eps;
  double t = 1.0;
  Vector xt;
};

/// x_t = (1 - t) x0 + t eps.
inline FlowSample forward(VecView x0, VecView eps, double t) {
  detail::require_same_size(x0.size(), eps.size(), "forward");
  if (!(t > 0.0 && t <= 1.0)) throw DomainError("forward: t outside (0, 1]");
  FlowSample s{Vector(x0.begin(), x0.end()), Vector(eps.begin(), eps.end()), t,
               Vector(x0.size())};
  const double a = 1.0 - t;
  for (std::size_t i = 0; i < x0.size(); ++i) s.xt[i] = a * x0[i] + t * eps[i];
  return s;
}

/// A network output read as an asymmetric velocity. Calibrated predictions carry their
/// scale so recovery can refuse a mismatched calibration.
struct AsymPrediction {
  Vector uA;
  bool calibrated = false;
  double s = 1.0;
};

struct ClampPolicy {
  double sigma_min = 0.0;

  double divisor(double t) const noexcept { return std::max(t, sigma_min); }
};

/// u_A = P eps - x0.
inline AsymPrediction asym_target(VecView x0, VecView eps, const SubspaceBasis& basis) {
  detail::require_same_size(x0.size(), basis.dim(), "asym_target");
  detail::require_same_size(eps.size(), basis.dim(), "asym_target");
  Vector u = basis.project(eps);
  for (std::size_t i = 0; i < u.size(); ++i) u[i] -= x0[i];
  return {std::move(u), false, 1.0};
}

/// u_A^cal = P eps - x0 / s.
inline AsymPrediction calibrated_target(VecView x0, VecView eps, const SubspaceBasis& basis,
                                        const Calibration& cal) {
  detail::require_same_size(x0.size(), basis.dim(), "calibrated_target");
  detail::require_same_size(eps.size(), basis.dim(), "calibrated_target");
  Vector u = basis.project(eps);
  for (std::size_t i = 0; i < u.size(); ++i) u[i] -= x0[i] / cal.s;
  return {std::move(u), true, cal.s};
}

struct Decomposition {
  Vector lowrank;  // P u_A
  Vector ortho;    // (I - P) u_A
};

inline Decomposition decompose(const AsymPrediction& pred, const SubspaceBasis& basis) {
  if (pred.calibrated && pred.s != 1.0) {
    throw CalibrationMismatch("decompose: expects an uncalibrated prediction");
  }
  Vector low = basis.project(pred.uA);
  Vector ortho = sub(pred.uA, low);
  if (basis.is_full()) std::fill(ortho.begin(), ortho.end(), 0.0);
  return {std::move(low), std::move(ortho)};
}

struct CalibratedTime {
  double tau;
  double k;
};

/// tau = t / (s(1 - t) + t), k = tau / t.
inline CalibratedTime calibrate_time(const Calibration& cal, double t) {
  if (!(t > 0.0 && t <= 1.0)) throw DomainError("calibrate_time: t outside (0, 1]");
  if (cal.is_identity()) return {t, 1.0};
  const double k = 1.0 / (cal.s * (1.0 - t) + t);
  return {k * t, k};
}

namespace detail {

// u = P(s k u_A + (1 - s k) x_t / sigma) + (I - P)(x_t + s u_A) / sigma.
// With s = k = 1 every extra term is an exact zero or unit factor, so the uncalibrated
// formula P u_A + (I - P)(x_t + u_A) / sigma is reproduced bit for bit.
inline Vector recover_impl(VecView uA, VecView xt, double t, const SubspaceBasis& basis,
                           double s, const ClampPolicy& clamp) {
  detail::require_same_size(uA.size(), basis.dim(), "recover");
  detail::require_same_size(xt.size(), basis.dim(), "recover");
  if (!(t > 0.0 && t <= 1.0)) throw DomainError("recover: t outside (0, 1]");
  const double sigma = clamp.divisor(t);
  const double k = calibrate_time(Calibration(s), t).k;
  const double sk = s * k;
  const std::size_t n = uA.size();

  Vector low_in(n), ortho_in(n);
  for (std::size_t i = 0; i < n; ++i) {
    low_in[i] = sk * uA[i] + (1.0 - sk) * xt[i] / sigma;
    ortho_in[i] = (xt[i] + s * uA[i]) / sigma;
  }
  if (basis.is_full()) return low_in;
  if (basis.is_empty()) return ortho_in;
  const Vector low = basis.project(low_in);
  const Vector ortho_low = basis.project(ortho_in);
  Vector u(n);
  for (std::size_t i = 0; i < n; ++i) u[i] = low[i] + (ortho_in[i] - ortho_low[i]);
  return u;
}

}  // namespace detail

/// u = P u_A + (I - P)(x_t + u_A) / max(t, sigma_min).
inline Vector recover_velocity(const AsymPrediction& pred, VecView xt, double t,
                               const SubspaceBasis& basis, const ClampPolicy& clamp) {
  if (pred.calibrated && pred.s != 1.0) {
    throw CalibrationMismatch("recover_velocity: prediction is calibrated; use recover_calibrated");
  }
  return detail::recover_impl(pred.uA, xt, t, basis, 1.0, clamp);
}

inline Vector recover_calibrated(const AsymPrediction& pred, VecView xt, double t,
                                 const SubspaceBasis& basis, const Calibration& cal,
                                 const ClampPolicy& clamp) {
  const double pred_s = pred.calibrated ? pred.s : 1.0;
  if (pred_s != cal.s) {
    throw CalibrationMismatch("recover_calibrated: prediction scale " + std::to_string(pred_s) +
                              " does not match calibration " + std::to_string(cal.s));
  }
  return detail::recover_impl(pred.uA, xt, t, basis, cal.s, clamp);
}

/// d u / d u_A applied to a cotangent: s k P g + (s / sigma)(I - P) g. Used by the trainer
/// to pull loss gradients back to the network output.
inline Vector recover_vjp(VecView g, double t, const SubspaceBasis& basis, const Calibration& cal,
                          const ClampPolicy& clamp) {
  const double sigma = clamp.divisor(t);
  const double k = calibrate_time(cal, t).k;
  const double sk = cal.s * k;
  const double so = cal.s / sigma;
  const std::size_t n = g.size();
  Vector out(n);
  if (basis.is_full()) {
    for (std::size_t i = 0; i < n; ++i) out[i] = sk * g[i];
    return out;
  }
  if (basis.is_empty()) {
    for (std::size_t i = 0; i < n; ++i) out[i] = so * g[i];
    return out;
  }
  const Vector pg = basis.project(g);
  for (std::size_t i = 0; i < n; ++i) out[i] = sk * pg[i] + so * (g[i] - pg[i]);
  return out;
}

/// x0-format view of a velocity: x0 = x_t - t u.
inline Vector velocity_to_x0(VecView u, VecView xt, double t) {
  detail::require_same_size(u.size(), xt.size(), "velocity_to_x0");
  Vector x0(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) x0[i] = xt[i] - t * u[i];
  return x0;
}

}  // namespace asymflow
