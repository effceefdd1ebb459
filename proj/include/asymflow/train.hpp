#pragma once

// AsymFlow training: a network read through the asymmetric parameterization, the batch
// losses with manual gradients, and the optimization loop.

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "asymflow/error.hpp"
#include "asymflow/losses.hpp"
#include "asymflow/matrix.hpp"
#include "asymflow/net.hpp"
#include "asymflow/param.hpp"
#include "asymflow/rng.hpp"
#include "asymflow/subspace.hpp"

namespace asymflow {

enum class LossMode { FM, VR, VRPerceptual };

inline std::string_view to_string(LossMode m) {
  switch (m) {
    case LossMode::FM: return "fm";
    case LossMode::VR: return "vr";
    case LossMode::VRPerceptual: return "vr_perceptual";
  }
  return "unknown";
}

inline LossMode loss_mode_from_string(std::string_view s) {
  if (s == "fm") return LossMode::FM;
  if (s == "vr") return LossMode::VR;
  if (s == "vr_perceptual") return LossMode::VRPerceptual;
  throw Error("unknown loss mode '" + std::string(s) + "'");
}

struct TrainConfig {
  std::size_t batch = 64;
  std::size_t steps = 5000;
  AdamConfig adam{};
  double time_shift = 1.0;
  double sigma_min = kDefaultSigmaMin;  // recovery clamp inside the loss
  std::uint64_t seed = 0;
  LossMode loss = LossMode::FM;
  LossWeights weights{};
  double ema_decay = 0.999;
  double cond_drop = 0.1;  // probability of replacing a label by the null label
  std::size_t eval_every = 0;

  void validate() const {
    if (batch == 0) throw DomainError("TrainConfig: batch must be >= 1");
    if (!(adam.lr > 0.0)) throw DomainError("TrainConfig: lr must be positive");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
      throw DomainError("TrainConfig: Adam betas must lie in [0, 1)");
    }
    if (!(time_shift >= 1.0)) throw DomainError("TrainConfig: time_shift must be >= 1");
    if (!(sigma_min >= 0.0)) throw DomainError("TrainConfig: sigma_min must be >= 0");
    if (!(ema_decay >= 0.0 && ema_decay < 1.0)) throw DomainError("TrainConfig: ema_decay outside [0, 1)");
    if (!(cond_drop >= 0.0 && cond_drop <= 1.0)) throw DomainError("TrainConfig: cond_drop outside [0, 1]");
  }
};

/// A velocity network read as u_A (calibrated when s != 1) together with its subspace.
struct AsymModel {
  VelocityNet net;
  SubspaceBasis basis;
  Calibration cal;
  ClampPolicy clamp;

  std::size_t dim() const { return basis.dim(); }

  /// Raw network output on the calibrated input (k x_t, k t).
  Matrix predict(const Matrix& xt, std::span<const double> t, std::span<const int> labels = {},
                 VelocityNet::Cache* cache = nullptr) const {
    if (cal.is_identity()) return net.forward(xt, t, labels, cache);
    Matrix in = xt;
    std::vector<double> tau(t.size());
    for (std::size_t b = 0; b < xt.rows(); ++b) {
      const CalibratedTime ct = calibrate_time(cal, t[b]);
      tau[b] = ct.tau;
      for (double& v : in.row(b)) v *= ct.k;
    }
    return net.forward(in, tau, labels, cache);
  }

  AsymPrediction predict_one(VecView xt, double t, int label = kNullLabel) const {
    Matrix m(1, xt.size(), Vector(xt.begin(), xt.end()));
    const double ts[1] = {t};
    const int ls[1] = {label};
    return {predict(m, ts, ls).storage(), !cal.is_identity(), cal.s};
  }

  /// Recovered full-rank velocity at a shared time t, with the given clamp.
  Matrix velocity(const Matrix& xt, double t, std::span<const int> labels,
                  const ClampPolicy& cl) const {
    const std::vector<double> ts(xt.rows(), t);
    const Matrix ua = predict(xt, ts, labels);
    Matrix u(xt.rows(), xt.cols());
    for (std::size_t b = 0; b < xt.rows(); ++b) {
      const Vector ub = detail::recover_impl(ua.row(b), xt.row(b), t, basis, cal.s, cl);
      std::copy(ub.begin(), ub.end(), u.row(b).begin());
    }
    return u;
  }
};

/// One training batch; rows are samples.
struct Batch {
  Matrix x0;
  Matrix eps;
  std::vector<double> t;
  std::vector<int> labels;  // empty or one per row
  Matrix x0L;               // paired low-rank targets (VR modes only)

  std::size_t size() const { return x0.rows(); }
};

struct BatchLoss {
  double loss = 0.0;         // batch mean of the total loss
  double lambda_mean = 0.0;  // mean adaptive coefficient (VR modes)
};

/// Everything the loss needs besides the model and the batch.
struct LossContext {
  LossMode mode = LossMode::FM;
  LossWeights weights{};
  const AsymModel* teacher = nullptr;             // frozen low-rank model
  const PerceptualMetric* metric = nullptr;       // VR + perceptual only
  const std::vector<double>* fixed_lambda = nullptr;  // per-sample lambda instead of lambda*
};

/// Batch-mean loss; when `grad` is non-empty, accumulates its gradient w.r.t. model.net.
inline BatchLoss loss_and_grad(const AsymModel& model, const Batch& batch, const LossContext& ctx,
                               std::span<double> grad = {}) {
  const std::size_t n = batch.size();
  const std::size_t dim = model.dim();
  detail::require_same_size(batch.x0.cols(), dim, "loss_and_grad");
  detail::require_same_size(batch.eps.rows(), n, "loss_and_grad (eps)");
  detail::require_same_size(batch.t.size(), n, "loss_and_grad (t)");
  const bool vr = ctx.mode != LossMode::FM;
  if (vr && !ctx.teacher) throw DomainError("loss_and_grad: VR loss needs a frozen low-rank model");
  if (vr) detail::require_same_size(batch.x0L.rows(), n, "loss_and_grad (x0L)");
  if (ctx.mode == LossMode::VRPerceptual && !ctx.metric) {
    throw DomainError("loss_and_grad: perceptual mode needs a metric");
  }
  if (ctx.fixed_lambda) detail::require_same_size(ctx.fixed_lambda->size(), n, "loss_and_grad (lambda)");

  Matrix xt(n, dim);
  for (std::size_t b = 0; b < n; ++b) {
    const double t = batch.t[b];
    if (!(t > 0.0 && t <= 1.0)) throw DomainError("loss_and_grad: t outside (0, 1]");
    for (std::size_t i = 0; i < dim; ++i)
      xt(b, i) = (1.0 - t) * batch.x0(b, i) + t * batch.eps(b, i);
  }

  Matrix x0L_hat;
  if (vr) {
    Matrix xtL(n, dim);
    for (std::size_t b = 0; b < n; ++b) {
      const double t = batch.t[b];
      for (std::size_t i = 0; i < dim; ++i)
        xtL(b, i) = (1.0 - t) * batch.x0L(b, i) + t * batch.eps(b, i);
    }
    x0L_hat = Matrix(n, dim);
    for (std::size_t b = 0; b < n; ++b) {
      const int lbl = batch.labels.empty() ? kNullLabel : batch.labels[b];
      const AsymPrediction p = ctx.teacher->predict_one(xtL.row(b), batch.t[b], lbl);
      const Vector u = detail::recover_impl(p.uA, xtL.row(b), batch.t[b], ctx.teacher->basis,
                                            ctx.teacher->cal.s, ctx.teacher->clamp);
      const Vector x0h = velocity_to_x0(u, xtL.row(b), batch.t[b]);
      std::copy(x0h.begin(), x0h.end(), x0L_hat.row(b).begin());
    }
  }

  VelocityNet::Cache cache;
  const Matrix ua = model.predict(xt, batch.t, batch.labels, grad.empty() ? nullptr : &cache);

  Matrix g_out(n, dim);
  BatchLoss out;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t b = 0; b < n; ++b) {
    const double t = batch.t[b];
    const Vector u_hat =
        detail::recover_impl(ua.row(b), xt.row(b), t, model.basis, model.cal.s, model.clamp);
    Vector g_u(dim);
    double lb = 0.0;
    if (!vr) {
      for (std::size_t i = 0; i < dim; ++i) {
        const double r = (batch.eps(b, i) - batch.x0(b, i)) - u_hat[i];
        lb += r * r;
        g_u[i] = -2.0 * r;
      }
    } else {
      const Vector x0_hat = velocity_to_x0(u_hat, xt.row(b), t);
      const double* fixed = ctx.fixed_lambda ? &(*ctx.fixed_lambda)[b] : nullptr;
      const VrTerms vt =
          vr_terms(batch.x0.row(b), x0_hat, batch.x0L.row(b), x0L_hat.row(b), t, ctx.weights, fixed);
      lb = vt.loss;
      out.lambda_mean += vt.lambda * inv_n;
      // d/du_hat of |r|^2 / t^2 with x0_hat = x_t - t u_hat.
      for (std::size_t i = 0; i < dim; ++i) g_u[i] = 2.0 * vt.residual[i] / t;
      if (ctx.mode == LossMode::VRPerceptual && vt.lambda != 0.0) {
        const double lp = perceptual_loss(x0_hat, batch.x0.row(b), vt.lambda, t, ctx.weights, *ctx.metric);
        lb += ctx.weights.omega_p * lp;
        const double c = ctx.weights.omega_p * vt.omega * vt.lambda / (t * t);
        const Vector gm = ctx.metric->gradient(x0_hat, batch.x0.row(b));
        for (std::size_t i = 0; i < dim; ++i) g_u[i] -= c * t * gm[i];
      }
    }
    out.loss += lb * inv_n;
    if (!grad.empty()) {
      const Vector g_ua = recover_vjp(g_u, t, model.basis, model.cal, model.clamp);
      for (std::size_t i = 0; i < dim; ++i) g_out(b, i) = g_ua[i] * inv_n;
    }
  }
  if (!std::isfinite(out.loss)) throw NonFiniteError("loss_and_grad: non-finite loss", 0);
  if (!grad.empty()) model.net.backward(cache, g_out, grad);
  return out;
}

/// Labeled training data; columns of `x` are samples.
struct TrainData {
  Matrix x;                 // D x N
  std::vector<int> labels;  // empty or N entries
  std::size_t num_classes = 0;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  double lambda_mean = 0.0;
};

struct TrainState {
  AsymModel model;
  VelocityNet ema;
  AdamState adam;
  Rng rng;
  std::size_t step = 0;
};

/// Fresh state: network initialized from `seed`, EMA equal to the initial weights.
inline TrainState init_train_state(const NetConfig& net_cfg, SubspaceBasis basis, Calibration cal,
                                   double sigma_min, std::uint64_t seed) {
  Rng init_rng(seed ^ 0x5eed5eed5eed5eedULL);
  TrainState st{AsymModel{VelocityNet(net_cfg, init_rng), std::move(basis), cal, ClampPolicy{sigma_min}},
                VelocityNet(), AdamState(), Rng(seed), 0};
  st.ema = st.model.net;
  st.adam = AdamState(st.model.net.num_params());
  return st;
}

/// Draws one batch. Labels are kept only for a conditional network; `paired` maps x0 to
/// its low-rank pair (VR modes).
inline Batch draw_batch(const TrainData& data, const TrainConfig& cfg, Rng& rng, bool conditional,
                        const std::function<Vector(VecView)>& paired = {}) {
  const std::size_t dim = data.x.rows();
  const std::size_t n = data.x.cols();
  if (n == 0) throw DomainError("draw_batch: empty dataset");
  Batch b{Matrix(cfg.batch, dim), Matrix(cfg.batch, dim), std::vector<double>(cfg.batch), {}, {}};
  const bool use_labels = conditional && data.num_classes > 0;
  if (use_labels) b.labels.resize(cfg.batch);
  if (paired) b.x0L = Matrix(cfg.batch, dim);
  for (std::size_t i = 0; i < cfg.batch; ++i) {
    const std::size_t j = rng.below(n);
    for (std::size_t k = 0; k < dim; ++k) b.x0(i, k) = data.x(k, j);
    if (use_labels) {
      const bool drop = rng.uniform() < cfg.cond_drop;
      b.labels[i] = drop ? kNullLabel : data.labels[j];
    }
    b.t[i] = sample_time(rng, cfg.time_shift);
    for (std::size_t k = 0; k < dim; ++k) b.eps(i, k) = rng.normal();
    if (paired) {
      const Vector xl = paired(b.x0.row(i));
      std::copy(xl.begin(), xl.end(), b.x0L.row(i).begin());
    }
  }
  return b;
}

using StepCallback = std::function<void(const StepRecord&, const TrainState&)>;

/// Runs cfg.steps optimizer steps from the current state. `on_step` sees every step;
/// non-finite losses abort with the step index.
inline void train(TrainState& st, const TrainData& data, const TrainConfig& cfg,
                  const LossContext& ctx, const std::function<Vector(VecView)>& paired = {},
                  const StepCallback& on_step = {}) {
  cfg.validate();
  detail::require_same_size(data.x.rows(), st.model.dim(), "train");
  if (ctx.mode != LossMode::FM && !paired) throw DomainError("train: VR loss needs paired low-rank targets");
  const std::size_t classes = st.model.net.config().num_classes;
  if (classes > 0 && classes != data.num_classes) {
    throw DimensionError("train: network class count does not match the dataset");
  }
  std::vector<double> grad(st.model.net.num_params());
  for (std::size_t it = 0; it < cfg.steps; ++it) {
    const Batch batch = draw_batch(data, cfg, st.rng, classes > 0, paired);
    std::fill(grad.begin(), grad.end(), 0.0);
    BatchLoss bl;
    try {
      bl = loss_and_grad(st.model, batch, ctx, grad);
    } catch (const NonFiniteError&) {
      throw NonFiniteError("train: non-finite loss at step " + std::to_string(st.step + 1), st.step + 1);
    }
    if (!all_finite(grad)) {
      throw NonFiniteError("train: non-finite gradient at step " + std::to_string(st.step + 1), st.step + 1);
    }
    adam_step(st.model.net.params(), grad, st.adam, cfg.adam);
    ema_update(st.ema.params(), st.model.net.params(), cfg.ema_decay);
    ++st.step;
    if (on_step) on_step({st.step, bl.loss, bl.lambda_mean}, st);
  }
}

/// The EMA weights wrapped as a model.
inline AsymModel ema_model(const TrainState& st) {
  return AsymModel{st.ema, st.model.basis, st.model.cal, st.model.clamp};
}

// ---- lifting a latent network into pixel space -------------------------------

/// Pixel network equal to x -> A G(A^T x, t) for a latent network G (weights fused into the
/// first and last affine layers). The result is full rank and trainable in pixel space.
inline VelocityNet lift_network(const VelocityNet& latent, const SubspaceBasis& basis) {
  const NetConfig& lc = latent.config();
  detail::require_same_size(lc.dim, basis.rank(), "lift_network");
  if (basis.is_empty()) throw DomainError("lift_network: rank-0 basis has no latent network");
  NetConfig pc = lc;
  pc.dim = basis.dim();
  VelocityNet out(pc);
  const Matrix& a = basis.A();
  const std::size_t D = pc.dim, r = lc.dim, tf = 2 * lc.time_freqs;
  const std::size_t last = latent.num_layers() - 1;
  for (std::size_t l = 0; l <= last; ++l) {
    auto w_src = latent.weight(l);
    auto w_dst = out.weight(l);
    auto b_src = latent.bias(l);
    auto b_dst = out.bias(l);
    if (l == 0) {
      // W' = [W_x A^T, W_time]
      for (Eigen::Index o = 0; o < w_src.rows(); ++o) {
        for (std::size_t i = 0; i < D; ++i) {
          double s = 0.0;
          for (std::size_t k = 0; k < r; ++k) s += w_src(o, k) * a(i, k);
          w_dst(o, i) = s;
        }
        for (std::size_t j = 0; j < tf; ++j) w_dst(o, D + j) = w_src(o, r + j);
      }
      b_dst = b_src;
    } else if (l == last) {
      // W' = A W, b' = A b
      for (std::size_t i = 0; i < D; ++i) {
        for (Eigen::Index c = 0; c < w_src.cols(); ++c) {
          double s = 0.0;
          for (std::size_t k = 0; k < r; ++k) s += a(i, k) * w_src(k, c);
          w_dst(i, c) = s;
        }
        double s = 0.0;
        for (std::size_t k = 0; k < r; ++k) s += a(i, k) * b_src(k);
        b_dst(i) = s;
      }
    } else {
      w_dst = w_src;
      b_dst = b_src;
    }
  }
  if (lc.num_classes > 0) {
    auto src = latent.embedding();
    const auto n = static_cast<std::size_t>(src.size());
    std::copy(src.data(), src.data() + n, out.params().end() - static_cast<std::ptrdiff_t>(n));
  }
  return out;
}

}  // namespace asymflow
