#include <gtest/gtest.h>

#include <cmath>

#include "asymflow/sampler.hpp"

using namespace asymflow;

namespace {

VelocityFn constant_field(Vector c) {
  return [c](const Matrix& x, double, std::span<const int>, const ClampPolicy&) {
    Matrix u(x.rows(), x.cols());
    for (std::size_t b = 0; b < x.rows(); ++b) std::copy(c.begin(), c.end(), u.row(b).begin());
    return u;
  };
}

VelocityFn decay_field() {
  return [](const Matrix& x, double, std::span<const int>, const ClampPolicy&) { return -1.0 * x; };
}

// Conditional velocity = label + 1 in every coordinate; unconditional = 0.
VelocityFn label_field(int* calls = nullptr) {
  return [calls](const Matrix& x, double, std::span<const int> labels, const ClampPolicy&) {
    if (calls) ++*calls;
    Matrix u(x.rows(), x.cols());
    for (std::size_t b = 0; b < x.rows(); ++b) {
      const int l = labels.empty() ? kNullLabel : labels[b];
      for (double& v : u.row(b)) v = l == kNullLabel ? 0.0 : l + 1.0;
    }
    return u;
  };
}

double decay_error(OdeMethod m, std::size_t steps) {
  SamplerConfig cfg;
  cfg.method = m;
  cfg.steps = steps;
  cfg.t_end = 0.01;
  const Matrix x = sample(decay_field(), Matrix(1, 1, Vector{1.0}), cfg);
  return std::abs(x(0, 0) - std::exp(1.0 - cfg.t_end));
}

}  // namespace

TEST(SamplerConfig, Validation) {
  SamplerConfig c;
  EXPECT_NO_THROW(c.validate());
  c.steps = 0;
  EXPECT_THROW(c.validate(), DomainError);
  c = {};
  c.t_end = 0.0;
  EXPECT_THROW(c.validate(), DomainError);
  c = {};
  c.guidance_scale = 0.5;
  EXPECT_THROW(c.validate(), DomainError);
  c = {};
  c.guidance_interval = {0.6, 0.2};
  EXPECT_THROW(c.validate(), DomainError);
}

TEST(EulerStep, ConstantFieldIsExact) {
  SamplerConfig cfg;
  cfg.method = OdeMethod::Euler;
  cfg.steps = 1;
  const Matrix x = sample(constant_field({2.0, -1.0}), Matrix(1, 2, Vector{0.5, 0.5}), cfg);
  EXPECT_NEAR(x(0, 0), 0.5 - 2.0 * (1 - cfg.t_end), 1e-15);
  EXPECT_NEAR(x(0, 1), 0.5 + 1.0 * (1 - cfg.t_end), 1e-15);
}

TEST(EulerStep, ZeroFieldLeavesState) {
  SamplerConfig cfg;
  const Matrix eps(2, 3, Vector{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(sample(constant_field({0, 0, 0}), eps, cfg).storage(), eps.storage());
}

TEST(EulerStep, RejectsBadInterval) {
  SamplerConfig cfg;
  const Matrix x(1, 1);
  EXPECT_THROW(euler_step(decay_field(), x, 0.5, 0.6, cfg), DomainError);
  EXPECT_THROW(euler_step(decay_field(), x, 1.5, 0.6, cfg), DomainError);
  EXPECT_THROW(euler_step(decay_field(), x, 0.5, cfg.t_end / 2, cfg), DomainError);
}

TEST(EulerStep, ReportsBlowUp) {
  SamplerConfig cfg;
  const VelocityFn boom = [](const Matrix& x, double, std::span<const int>, const ClampPolicy&) {
    return 1e308 * x;
  };
  EXPECT_THROW(sample(boom, Matrix(1, 1, Vector{10.0}), cfg), NonFiniteError);
}

TEST(HeunStep, ConstantFieldMatchesEuler) {
  SamplerConfig e, h;
  e.method = OdeMethod::Euler;
  h.method = OdeMethod::Heun;
  const Matrix eps(1, 2, Vector{0.3, -0.7});
  const Matrix a = sample(constant_field({1.5, 0.25}), eps, e);
  const Matrix b = sample(constant_field({1.5, 0.25}), eps, h);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-14);
}

TEST(ConvergenceOrder, EulerIsFirstOrder) {
  const double slope = std::log2(decay_error(OdeMethod::Euler, 40) / decay_error(OdeMethod::Euler, 320)) / 3.0;
  EXPECT_NEAR(slope, 1.0, 0.2);
  EXPECT_NEAR(decay_error(OdeMethod::Euler, 160) / decay_error(OdeMethod::Euler, 320), 2.0, 0.2);
}

TEST(ConvergenceOrder, HeunIsSecondOrder) {
  const double slope = std::log2(decay_error(OdeMethod::Heun, 40) / decay_error(OdeMethod::Heun, 320)) / 3.0;
  EXPECT_NEAR(slope, 2.0, 0.2);
  EXPECT_NEAR(decay_error(OdeMethod::Heun, 160) / decay_error(OdeMethod::Heun, 320), 4.0, 0.4);
}

TEST(Sampler, PassesClampToModel) {
  SamplerConfig cfg;
  cfg.sigma_min = 0.04;
  cfg.steps = 5;
  double last_t = 0.0, seen_clamp = -1.0;
  const VelocityFn probe = [&](const Matrix& x, double t, std::span<const int>, const ClampPolicy& cl) {
    last_t = t;
    seen_clamp = cl.divisor(t);
    return Matrix(x.rows(), x.cols());
  };
  sample(probe, Matrix(1, 1), cfg);
  EXPECT_EQ(last_t, cfg.t_end);
  EXPECT_EQ(seen_clamp, 0.04);
}

TEST(Guidance, OutsideIntervalIsBitIdentical) {
  SamplerConfig cfg;
  cfg.guidance_scale = 3.0;
  cfg.guidance_interval = {0.2, 0.5};
  const std::vector<int> labels{0, 1};
  const Matrix x(2, 2, Vector{0.1, 0.2, 0.3, 0.4});
  const VelocityFn f = label_field();
  for (double t : {0.1, 0.19, 0.51, 0.9, 1.0}) {
    const Matrix g = guided_velocity(f, x, t, labels, cfg);
    const Matrix p = f(x, t, labels, ClampPolicy{cfg.sigma_min});
    EXPECT_EQ(g.storage(), p.storage()) << "t = " << t;
  }
  for (double t : {0.2, 0.35, 0.5}) {
    const Matrix g = guided_velocity(f, x, t, labels, cfg);
    EXPECT_EQ(g(0, 0), 3.0);  // 0 + 3 (1 - 0)
    EXPECT_EQ(g(1, 1), 6.0);  // 0 + 3 (2 - 0)
  }
}

TEST(Guidance, UnitScaleSkipsUnconditionalPass) {
  SamplerConfig cfg;
  cfg.steps = 4;
  cfg.method = OdeMethod::Euler;
  int calls = 0;
  const std::vector<int> labels{1};
  const Matrix a = sample(label_field(&calls), Matrix(1, 1), cfg, labels);
  EXPECT_EQ(calls, 4);
  cfg.guidance_scale = 2.0;
  calls = 0;
  sample(label_field(&calls), Matrix(1, 1), cfg, labels);
  EXPECT_EQ(calls, 8);
  EXPECT_NEAR(a(0, 0), -2.0 * (1 - cfg.t_end), 1e-14);
}

TEST(Guidance, NoLabelsMeansNoGuidance) {
  SamplerConfig cfg;
  cfg.guidance_scale = 4.0;
  int calls = 0;
  guided_velocity(label_field(&calls), Matrix(1, 1), 0.5, {}, cfg);
  EXPECT_EQ(calls, 1);
}

TEST(Sampler, SingleStepOracleFormula) {
  // Exact velocity for data concentrated at mu: u = (x - mu) / t.
  const Vector mu{1.0, -2.0};
  const VelocityFn oracle = [mu](const Matrix& x, double t, std::span<const int>, const ClampPolicy&) {
    Matrix u = x;
    for (std::size_t b = 0; b < x.rows(); ++b)
      for (std::size_t i = 0; i < x.cols(); ++i) u(b, i) = (x(b, i) - mu[i]) / t;
    return u;
  };
  SamplerConfig cfg;
  cfg.method = OdeMethod::Euler;
  cfg.steps = 1;
  const Vector eps{0.4, 0.9};
  const Vector x = sample(oracle, eps, cfg, kNullLabel);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(x[i], eps[i] - (eps[i] - mu[i]) * (1 - cfg.t_end), 1e-15);
}

TEST(Sampler, GaussianDataEndpoint) {
  // x0 ~ N(mu, s^2 I): x_t has mean (1-t) mu and variance v_t = (1-t)^2 s^2 + t^2, and the
  // flow map is x_t = (1-t) mu + sqrt(v_t) eps.
  const Vector mu{1.0, -0.5, 2.0};
  const double s = 0.6;
  const VelocityFn exact = [&](const Matrix& x, double t, std::span<const int>, const ClampPolicy&) {
    const double a = 1 - t;
    const double v = a * a * s * s + t * t;
    Matrix u = x;
    for (std::size_t b = 0; b < x.rows(); ++b)
      for (std::size_t i = 0; i < x.cols(); ++i) {
        const double ex0 = mu[i] + a * s * s / v * (x(b, i) - a * mu[i]);
        u(b, i) = (x(b, i) - ex0) / t;
      }
    return u;
  };
  SamplerConfig cfg;
  const Matrix eps(2, 3, Vector{0.3, -1.2, 0.8, 2.0, 0.1, -0.4});
  const Matrix x = sample(exact, eps, cfg);
  const double te = cfg.t_end;
  const double sd = std::sqrt((1 - te) * (1 - te) * s * s + te * te);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(x(b, i), (1 - te) * mu[i] + sd * eps(b, i), 1e-3);
}

TEST(Sampler, ModelVelocityPlumbing) {
  // Zero head with a full basis recovers u = 0, so sampling returns the noise.
  NetConfig nc;
  nc.dim = 3;
  nc.hidden = 8;
  nc.depth = 1;
  Rng rng(1);
  const AsymModel model{VelocityNet(nc, rng), SubspaceBasis::full(3), Calibration(), ClampPolicy{}};
  SamplerConfig cfg;
  cfg.steps = 3;
  const Matrix eps(1, 3, Vector{0.5, -1.0, 2.0});
  EXPECT_EQ(sample(velocity_fn(model), eps, cfg).storage(), eps.storage());
  // Rank 0 with a zero head gives u = x / max(t, sigma_min).
  const AsymModel empty{VelocityNet(nc, rng), SubspaceBasis::empty(3), Calibration(), ClampPolicy{}};
  const Matrix u = empty.velocity(eps, 0.01, {}, ClampPolicy{0.04});
  EXPECT_NEAR(u(0, 2), 2.0 / 0.04, 1e-12);
}
