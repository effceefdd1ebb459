#pragma once

// Lifting a latent velocity model into a rank-d pixel flow, and the paired integration
// used to check that the lifted pixel trajectory stays coupled to the latent one.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "asymflow/error.hpp"
#include "asymflow/matrix.hpp"
#include "asymflow/param.hpp"
#include "asymflow/subspace.hpp"

namespace asymflow {

/// Latent velocity model u_z = G(z, tau). Must be deterministic and re-entrant.
struct LatentField {
  std::size_t dim = 0;
  std::function<Vector(VecView z, double tau)> eval;

  Vector operator()(VecView z, double tau) const {
    Vector u = eval(z, tau);
    detail::require_same_size(u.size(), dim, "LatentField");
    return u;
  }
};

struct LiftedField {
  LatentField latent;
  SubspaceBasis basis;
  Calibration cal;
  ClampPolicy clamp;

  LiftedField(LatentField f, SubspaceBasis b, Calibration c = {}, ClampPolicy cl = {})
      : latent(std::move(f)), basis(std::move(b)), cal(c), clamp(cl) {
    detail::require_same_size(latent.dim, basis.rank(), "LiftedField: basis rank vs latent dim");
  }
};

struct LiftedInput {
  Vector z;
  double tau;
};

/// z = A^T (k x_t), tau = k t.
inline LiftedInput lift_input(VecView xt, const SubspaceBasis& basis, const Calibration& cal,
                              double t) {
  detail::require_same_size(xt.size(), basis.dim(), "lift_input");
  const CalibratedTime ct = calibrate_time(cal, t);
  if (ct.k == 1.0) return {basis.reduce(xt), ct.tau};
  return {basis.reduce(scale(ct.k, xt)), ct.tau};
}

/// Pixel velocity of the lifted model, through the general calibrated recovery with
/// u_A = A u_z.
inline Vector lifted_velocity(const LiftedField& field, VecView xt, double t) {
  const LiftedInput in = lift_input(xt, field.basis, field.cal, t);
  const Vector uz = field.latent(in.z, in.tau);
  AsymPrediction pred{field.basis.lift(uz), true, field.cal.s};
  return recover_calibrated(pred, xt, t, field.basis, field.cal, field.clamp);
}

enum class OdeMethod { Euler, Heun };

inline std::string_view to_string(OdeMethod m) { return m == OdeMethod::Euler ? "euler" : "heun"; }

inline OdeMethod ode_method_from_string(std::string_view s) {
  if (s == "euler") return OdeMethod::Euler;
  if (s == "heun") return OdeMethod::Heun;
  throw Error("unknown ODE method '" + std::string(s) + "'");
}

/// Latent and lifted pixel states on a shared grid. Index i holds time grid[i]; grid[0] = 1.
struct CoupledTrajectory {
  std::vector<double> grid;
  std::vector<Vector> z_path;
  std::vector<Vector> x_path;
  Vector eps;
};

/// `steps` uniform intervals from 1 down to t_end.
inline std::vector<double> uniform_grid(std::size_t steps, double t_end) {
  if (steps == 0) throw DomainError("uniform_grid: steps must be >= 1");
  if (!(t_end >= 0.0 && t_end < 1.0)) throw DomainError("uniform_grid: t_end outside [0, 1)");
  std::vector<double> g(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i)
    g[i] = 1.0 - (1.0 - t_end) * static_cast<double>(i) / static_cast<double>(steps);
  g[steps] = t_end;
  return g;
}

inline void validate_grid(const std::vector<double>& grid) {
  if (grid.size() < 2 || grid.front() != 1.0) {
    throw DomainError("grid must start at t = 1 and contain at least two points");
  }
  for (std::size_t i = 1; i < grid.size(); ++i) {
    if (!(grid[i] < grid[i - 1]) || !(grid[i] > 0.0)) {
      throw DomainError("grid must be strictly decreasing and positive");
    }
  }
}

/// Integrates dz/dt = G(z, t) from A^T eps and the lifted pixel ODE from eps on one grid.
/// Only the uncalibrated lift (s = 1) is coupled this way.
inline CoupledTrajectory integrate_coupled(const LiftedField& field, VecView eps,
                                           const std::vector<double>& grid, OdeMethod method) {
  validate_grid(grid);
  detail::require_same_size(eps.size(), field.basis.dim(), "integrate_coupled");
  if (!field.cal.is_identity()) {
    throw DomainError("integrate_coupled: trajectory coupling is defined for s = 1");
  }
  CoupledTrajectory tr;
  tr.grid = grid;
  tr.eps.assign(eps.begin(), eps.end());
  tr.z_path.reserve(grid.size());
  tr.x_path.reserve(grid.size());
  tr.z_path.push_back(field.basis.reduce(eps));
  tr.x_path.push_back(tr.eps);

  for (std::size_t i = 1; i < grid.size(); ++i) {
    const double t0 = grid[i - 1];
    const double t1 = grid[i];
    const double dt = t1 - t0;
    const Vector& z = tr.z_path.back();
    const Vector& x = tr.x_path.back();
    const Vector vz = field.latent(z, t0);
    const Vector vx = lifted_velocity(field, x, t0);
    Vector z_next = axpy(z, dt, vz);
    Vector x_next = axpy(x, dt, vx);
    if (method == OdeMethod::Heun) {
      const Vector vz2 = field.latent(z_next, t1);
      const Vector vx2 = lifted_velocity(field, x_next, t1);
      for (std::size_t k = 0; k < z.size(); ++k) z_next[k] = z[k] + dt * 0.5 * (vz[k] + vz2[k]);
      for (std::size_t k = 0; k < x.size(); ++k) x_next[k] = x[k] + dt * 0.5 * (vx[k] + vx2[k]);
    }
    if (!all_finite(z_next) || !all_finite(x_next)) {
      throw NonFiniteError("integrate_coupled: non-finite state at t = " + std::to_string(t1), i);
    }
    tr.z_path.push_back(std::move(z_next));
    tr.x_path.push_back(std::move(x_next));
  }
  return tr;
}

namespace detail {

inline double coupling_error_at(const CoupledTrajectory& tr, const SubspaceBasis& basis,
                                std::size_t i) {
  const Vector ortho = basis.project_complement(tr.eps);
  const Vector lifted = basis.lift(tr.z_path[i]);
  const double t = tr.grid[i];
  double err = 0.0;
  for (std::size_t k = 0; k < lifted.size(); ++k)
    err = std::max(err, std::abs(tr.x_path[i][k] - (lifted[k] + t * ortho[k])));
  return err;
}

}  // namespace detail

/// max over grid points of ||x - (A z + sigma_t (I - P) eps)||_max.
inline double coupling_residual(const CoupledTrajectory& tr, const SubspaceBasis& basis) {
  double r = 0.0;
  for (std::size_t i = 0; i < tr.grid.size(); ++i)
    r = std::max(r, detail::coupling_error_at(tr, basis, i));
  return r;
}

/// Same identity at the last grid point only.
inline double final_identity_error(const CoupledTrajectory& tr, const SubspaceBasis& basis) {
  return detail::coupling_error_at(tr, basis, tr.grid.size() - 1);
}

}  // namespace asymflow
