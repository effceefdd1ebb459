#pragma once

// Deterministic ODE sampling from t = 1 to t_end over a recovered velocity field.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "asymflow/error.hpp"
#include "asymflow/latentlift.hpp"
#include "asymflow/losses.hpp"
#include "asymflow/matrix.hpp"
#include "asymflow/param.hpp"
#include "asymflow/train.hpp"

namespace asymflow {

struct SamplerConfig {
  OdeMethod method = OdeMethod::Heun;
  std::size_t steps = 50;
  double t_end = 1e-3;
  double sigma_min = kDefaultSigmaMin;
  double guidance_scale = 1.0;
  Interval guidance_interval{0.0, 1.0};

  void validate() const {
    if (steps == 0) throw DomainError("SamplerConfig: steps must be >= 1");
    if (!(t_end > 0.0 && t_end < 1.0)) throw DomainError("SamplerConfig: t_end outside (0, 1)");
    if (!(sigma_min >= 0.0)) throw DomainError("SamplerConfig: sigma_min must be >= 0");
    if (!(guidance_scale >= 1.0)) throw DomainError("SamplerConfig: guidance_scale must be >= 1");
    const Interval& g = guidance_interval;
    if (!(g.lo >= 0.0 && g.lo <= g.hi && g.hi <= 1.0)) {
      throw DomainError("SamplerConfig: guidance interval must satisfy 0 <= lo <= hi <= 1");
    }
  }
};

/// Batched recovered velocity u(X, t); rows of X are states. Empty labels = unconditional.
using VelocityFn =
    std::function<Matrix(const Matrix& x, double t, std::span<const int> labels, const ClampPolicy&)>;

inline VelocityFn velocity_fn(const AsymModel& model) {
  return [&model](const Matrix& x, double t, std::span<const int> labels, const ClampPolicy& cl) {
    return model.velocity(x, t, labels, cl);
  };
}

/// u_uncond + w (u_cond - u_uncond) when t lies in the guidance interval; the plain
/// (conditional) velocity otherwise.
inline Matrix guided_velocity(const VelocityFn& model, const Matrix& x, double t,
                              std::span<const int> labels, const SamplerConfig& cfg) {
  const ClampPolicy clamp{cfg.sigma_min};
  const Interval& g = cfg.guidance_interval;
  const bool active = cfg.guidance_scale != 1.0 && !labels.empty() && t >= g.lo && t <= g.hi;
  Matrix u = model(x, t, labels, clamp);
  if (!active) return u;
  const std::vector<int> null_labels(x.rows(), kNullLabel);
  const Matrix uu = model(x, t, null_labels, clamp);
  const double w = cfg.guidance_scale;
  for (std::size_t i = 0; i < u.size(); ++i) {
    u.data()[i] = uu.data()[i] + w * (u.data()[i] - uu.data()[i]);
  }
  return u;
}

namespace detail {

inline void check_step(double t_from, double t_to, const SamplerConfig& cfg) {
  if (!(t_from <= 1.0 && t_from > t_to && t_to >= cfg.t_end * (1.0 - 1e-12))) {
    throw DomainError("sampler step requires 1 >= t_from > t_to >= t_end");
  }
}

inline void check_finite(const Matrix& x, double t) {
  if (!x.is_finite()) throw NonFiniteError("sampler: non-finite state at t = " + std::to_string(t), 0);
}

}  // namespace detail

/// x + (t_to - t_from) u(x, t_from)
inline Matrix euler_step(const VelocityFn& model, const Matrix& x, double t_from, double t_to,
                         const SamplerConfig& cfg, std::span<const int> labels = {}) {
  detail::check_step(t_from, t_to, cfg);
  const Matrix u = guided_velocity(model, x, t_from, labels, cfg);
  Matrix out = x;
  const double dt = t_to - t_from;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += dt * u.data()[i];
  detail::check_finite(out, t_to);
  return out;
}

/// Trapezoidal predictor-corrector.
inline Matrix heun_step(const VelocityFn& model, const Matrix& x, double t_from, double t_to,
                        const SamplerConfig& cfg, std::span<const int> labels = {}) {
  detail::check_step(t_from, t_to, cfg);
  const double dt = t_to - t_from;
  const Matrix u1 = guided_velocity(model, x, t_from, labels, cfg);
  Matrix pred = x;
  for (std::size_t i = 0; i < pred.size(); ++i) pred.data()[i] += dt * u1.data()[i];
  detail::check_finite(pred, t_to);
  const Matrix u2 = guided_velocity(model, pred, t_to, labels, cfg);
  Matrix out = x;
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data()[i] += dt * 0.5 * (u1.data()[i] + u2.data()[i]);
  detail::check_finite(out, t_to);
  return out;
}

/// Integrates every row of `eps` from t = 1 to cfg.t_end on a uniform grid.
inline Matrix sample(const VelocityFn& model, const Matrix& eps, const SamplerConfig& cfg,
                     std::span<const int> labels = {}) {
  cfg.validate();
  if (!labels.empty()) detail::require_same_size(labels.size(), eps.rows(), "sample (labels)");
  const std::vector<double> grid = uniform_grid(cfg.steps, cfg.t_end);
  Matrix x = eps;
  for (std::size_t i = 1; i < grid.size(); ++i) {
    x = cfg.method == OdeMethod::Euler ? euler_step(model, x, grid[i - 1], grid[i], cfg, labels)
                                       : heun_step(model, x, grid[i - 1], grid[i], cfg, labels);
  }
  return x;
}

inline Vector sample(const VelocityFn& model, VecView eps, const SamplerConfig& cfg, int label) {
  Matrix m(1, eps.size(), Vector(eps.begin(), eps.end()));
  const int ls[1] = {label};
  return sample(model, m, cfg, label == kNullLabel ? std::span<const int>{} : std::span<const int>(ls))
      .storage();
}

}  // namespace asymflow
