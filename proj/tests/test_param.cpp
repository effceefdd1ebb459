#include <gtest/gtest.h>

#include <cmath>

#include "asymflow/param.hpp"
#include "asymflow/rng.hpp"

using namespace asymflow;

namespace {

SubspaceBasis axis_basis() { return SubspaceBasis(Matrix::from_rows({{1}, {0}}), Provenance::Random); }

Vector gaussian(Rng& rng, std::size_t n) {
  Vector v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

void expect_vec_near(const Vector& a, const Vector& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

}  // namespace

TEST(Schedule, Endpoints) {
  EXPECT_EQ(schedule(0.0).alpha, 1.0);
  EXPECT_EQ(schedule(1.0).sigma, 1.0);
  EXPECT_THROW(schedule(1.5), DomainError);
  EXPECT_THROW(schedule(-0.1), DomainError);
}

TEST(Forward, Midpoint) {
  const FlowSample s = forward(Vector{1, 2}, Vector{3, 4}, 0.5);
  expect_vec_near(s.xt, {2, 3}, 1e-15);
  EXPECT_THROW(forward(Vector{1}, Vector{1, 2}, 0.5), DimensionError);
  EXPECT_THROW(forward(Vector{1}, Vector{1}, 0.0), DomainError);
}

TEST(AsymTarget, AxisExample) {
  const AsymPrediction p = asym_target(Vector{1, 2}, Vector{3, 4}, axis_basis());
  expect_vec_near(p.uA, {2, -2}, 1e-15);
  const Decomposition d = decompose(p, axis_basis());
  expect_vec_near(d.lowrank, {2, 0}, 1e-15);
  expect_vec_near(d.ortho, {0, -2}, 1e-15);
}

TEST(AsymTarget, EndpointsMatchFlowAndData) {
  Rng rng(3);
  const Vector x0 = gaussian(rng, 5), eps = gaussian(rng, 5);
  expect_vec_near(asym_target(x0, eps, SubspaceBasis::full(5)).uA, sub(eps, x0), 0.0);
  expect_vec_near(asym_target(x0, eps, SubspaceBasis::empty(5)).uA, scale(-1.0, x0), 0.0);
}

TEST(Recover, AxisExample) {
  const AsymPrediction p{{2, -2}};
  const Vector u = recover_velocity(p, Vector{2, 3}, 0.5, axis_basis(), {});
  expect_vec_near(u, {2, 2}, 1e-15);
}

TEST(Recover, ExactOnRandomCases) {
  Rng rng(42);
  double worst = 0.0;
  for (int c = 0; c < 10000; ++c) {
    const std::size_t d = 1 + rng.below(8);
    const std::size_t r = rng.below(d + 1);
    const SubspaceBasis b = r == 0 ? SubspaceBasis::empty(d) : fit_random(d, r, rng);
    const Vector x0 = gaussian(rng, d), eps = gaussian(rng, d);
    const double t = rng.uniform(0.05, 1.0);
    const FlowSample s = forward(x0, eps, t);
    const Vector u = recover_velocity(asym_target(x0, eps, b), s.xt, t, b, {});
    const Vector ref = sub(eps, x0);
    worst = std::max(worst, max_abs(sub(u, ref)) / std::max(1.0, max_abs(ref)));
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(Recover, FullAndEmptyEndpoints) {
  Rng rng(5);
  const Vector uA = gaussian(rng, 4), xt = gaussian(rng, 4);
  const AsymPrediction p{uA};
  expect_vec_near(recover_velocity(p, xt, 0.3, SubspaceBasis::full(4), {}), uA, 0.0);
  Vector want(4);
  for (std::size_t i = 0; i < 4; ++i) want[i] = (xt[i] + uA[i]) / 0.3;
  expect_vec_near(recover_velocity(p, xt, 0.3, SubspaceBasis::empty(4), {}), want, 1e-14);
}

TEST(Recover, ClampBoundsOrthogonalGain) {
  // Below sigma_min the orthogonal output is (x_t + u_A) / sigma_min and stops growing.
  const AsymPrediction p{{0, 1}};
  const ClampPolicy clamp{0.04};
  double prev = 0.0;
  for (double t : {0.5, 0.2, 0.1, 0.05, 0.04, 0.01, 0.001}) {
    const double u = std::abs(recover_velocity(p, Vector{0, 0}, t, axis_basis(), clamp)[1]);
    EXPECT_GE(u, prev);
    EXPECT_LE(u, 1.0 / 0.04 + 1e-12);
    prev = u;
  }
  EXPECT_DOUBLE_EQ(recover_velocity(p, Vector{0, 0}, 0.001, axis_basis(), clamp)[1], 25.0);
}

TEST(Decompose, CompletesOnRandomInputs) {
  Rng rng(9);
  for (int c = 0; c < 200; ++c) {
    const SubspaceBasis b = fit_random(6, 1 + rng.below(5), rng);
    const AsymPrediction p{gaussian(rng, 6)};
    const Decomposition d = decompose(p, b);
    expect_vec_near(add(d.lowrank, d.ortho), p.uA, 1e-12);
    EXPECT_NEAR(dot(d.lowrank, d.ortho), 0.0, 1e-12);
    expect_vec_near(b.project(d.ortho), Vector(6, 0.0), 1e-12);
  }
}

TEST(CalibrateTime, Examples) {
  const CalibratedTime ct = calibrate_time(Calibration(2.0), 0.5);
  EXPECT_NEAR(ct.tau, 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(ct.k, 2.0 / 3.0, 1e-15);
  EXPECT_EQ(calibrate_time(Calibration(2.0), 1.0).tau, 1.0);
  EXPECT_EQ(calibrate_time(Calibration(), 0.37).tau, 0.37);
  EXPECT_THROW(calibrate_time(Calibration(2.0), 0.0), DomainError);
}

TEST(CalibrateTime, MonotoneInT) {
  for (double s : {0.3, 1.0, 4.0}) {
    double prev = 0.0;
    for (int i = 1; i <= 100; ++i) {
      const double tau = calibrate_time(Calibration(s), i / 100.0).tau;
      EXPECT_GT(tau, prev);
      prev = tau;
    }
  }
}

TEST(CalibratedTarget, Examples) {
  const AsymPrediction p = calibrated_target(Vector{2, 2}, Vector{3, 4}, axis_basis(), Calibration(2.0));
  expect_vec_near(p.uA, {2, -1}, 1e-15);
  const AsymPrediction e =
      calibrated_target(Vector{3}, Vector{5}, SubspaceBasis::empty(1), Calibration(3.0));
  expect_vec_near(e.uA, {-1}, 1e-15);
}

TEST(CalibratedRecovery, ExactOnRandomCases) {
  Rng rng(77);
  double worst = 0.0;
  for (int c = 0; c < 10000; ++c) {
    const std::size_t d = 1 + rng.below(8);
    const std::size_t r = rng.below(d + 1);
    const SubspaceBasis b = r == 0 ? SubspaceBasis::empty(d) : fit_random(d, r, rng);
    const Calibration cal(rng.uniform(0.25, 4.0));
    const Vector x0 = gaussian(rng, d), eps = gaussian(rng, d);
    const double t = rng.uniform(0.05, 1.0);
    const FlowSample s = forward(x0, eps, t);
    const Vector u = recover_calibrated(calibrated_target(x0, eps, b, cal), s.xt, t, b, cal, {});
    const Vector ref = sub(eps, x0);
    worst = std::max(worst, max_abs(sub(u, ref)) / std::max(1.0, max_abs(ref)));
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(CalibratedRecovery, UnitScaleIsBitIdentical) {
  Rng rng(8);
  for (int c = 0; c < 100; ++c) {
    const SubspaceBasis b = fit_random(5, 1 + rng.below(4), rng);
    const Vector x0 = gaussian(rng, 5), eps = gaussian(rng, 5);
    const double t = rng.uniform(0.01, 1.0);
    const Vector xt = forward(x0, eps, t).xt;
    const ClampPolicy clamp{0.04};
    const Vector a = recover_velocity(asym_target(x0, eps, b), xt, t, b, clamp);
    const Vector c2 =
        recover_calibrated(calibrated_target(x0, eps, b, Calibration(1.0)), xt, t, b, Calibration(1.0), clamp);
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], c2[i]);
  }
}

TEST(CalibratedRecovery, RejectsMismatch) {
  const SubspaceBasis b = axis_basis();
  const AsymPrediction p = calibrated_target(Vector{1, 1}, Vector{1, 1}, b, Calibration(2.0));
  EXPECT_THROW(recover_velocity(p, Vector{1, 1}, 0.5, b, {}), CalibrationMismatch);
  EXPECT_THROW(recover_calibrated(p, Vector{1, 1}, 0.5, b, Calibration(3.0), {}), CalibrationMismatch);
  EXPECT_THROW(decompose(p, b), CalibrationMismatch);
}

TEST(RecoverVjp, MatchesFiniteDifferences) {
  Rng rng(21);
  const SubspaceBasis b = fit_random(5, 2, rng);
  const Calibration cal(1.7);
  const ClampPolicy clamp{0.04};
  for (double t : {0.02, 0.3, 0.9}) {
    const Vector uA = gaussian(rng, 5), xt = gaussian(rng, 5), g = gaussian(rng, 5);
    const Vector vjp = recover_vjp(g, t, b, cal, clamp);
    const double h = 1e-6;
    for (std::size_t j = 0; j < 5; ++j) {
      Vector up = uA, dn = uA;
      up[j] += h;
      dn[j] -= h;
      const Vector fp = detail::recover_impl(up, xt, t, b, cal.s, clamp);
      const Vector fm = detail::recover_impl(dn, xt, t, b, cal.s, clamp);
      const double fd = (dot(g, fp) - dot(g, fm)) / (2 * h);
      EXPECT_NEAR(vjp[j], fd, 1e-6 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(VelocityToX0, InvertsFlow) {
  const Vector x0{1, -2}, eps{0.5, 3};
  const FlowSample s = forward(x0, eps, 0.25);
  expect_vec_near(velocity_to_x0(sub(eps, x0), s.xt, 0.25), x0, 1e-15);
}
