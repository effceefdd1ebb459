#pragma once

// Small MLP velocity network with hand-written reverse mode, plus Adam, EMA and the
// logit-normal time sampler used by the trainer.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "asymflow/error.hpp"
#include "asymflow/matrix.hpp"
#include "asymflow/rng.hpp"

namespace asymflow {

struct NetConfig {
  std::size_t dim = 16;         // input/output dimension
  std::size_t hidden = 256;
  std::size_t depth = 3;        // hidden layers
  std::size_t time_freqs = 8;   // sinusoidal time features: sin/cos at 2^k, k < time_freqs
  std::size_t num_classes = 0;  // 0 disables the class embedding
  bool zero_head = true;

  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

inline constexpr int kNullLabel = -1;

/// out = W_L silu(... silu(W_0 [x, emb(t)] + b_0 + E[label]) ...) + b_L
///
/// All parameters live in one flat buffer; layer weights are column-major views into it.
class VelocityNet {
 public:
  using MatMap = Eigen::Map<Eigen::MatrixXd>;
  using ConstMatMap = Eigen::Map<const Eigen::MatrixXd>;
  using VecMap = Eigen::Map<Eigen::VectorXd>;
  using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

  /// Activations kept for the backward pass.
  struct Cache {
    std::vector<Eigen::MatrixXd> pre;   // pre-activations per hidden layer
    std::vector<Eigen::MatrixXd> post;  // post[0] = network input, post[l+1] = silu(pre[l])
    std::vector<int> labels;
  };

  VelocityNet() = default;

  explicit VelocityNet(const NetConfig& cfg) : cfg_(cfg) { layout(); }

  VelocityNet(const NetConfig& cfg, Rng& rng) : cfg_(cfg) {
    layout();
    initialize(rng);
  }

  const NetConfig& config() const noexcept { return cfg_; }
  std::size_t input_dim() const noexcept { return cfg_.dim + 2 * cfg_.time_freqs; }
  std::size_t num_params() const noexcept { return params_.size(); }
  std::span<double> params() noexcept { return params_; }
  std::span<const double> params() const noexcept { return params_; }
  std::size_t num_layers() const noexcept { return layers_.size(); }

  MatMap weight(std::size_t l) {
    return MatMap(params_.data() + layers_[l].w, layers_[l].out, layers_[l].in);
  }
  ConstMatMap weight(std::size_t l) const {
    return ConstMatMap(params_.data() + layers_[l].w, layers_[l].out, layers_[l].in);
  }
  VecMap bias(std::size_t l) { return VecMap(params_.data() + layers_[l].b, layers_[l].out); }
  ConstVecMap bias(std::size_t l) const {
    return ConstVecMap(params_.data() + layers_[l].b, layers_[l].out);
  }
  /// hidden x (num_classes + 1); the last column is the null (unconditional) label.
  ConstMatMap embedding() const {
    return ConstMatMap(params_.data() + embed_, cfg_.hidden, cfg_.num_classes + 1);
  }

  /// Sinusoidal time features at frequencies 2^k.
  void time_features(double t, std::span<double> out) const {
    for (std::size_t k = 0; k < cfg_.time_freqs; ++k) {
      const double w = std::ldexp(1.0, static_cast<int>(k));
      out[2 * k] = std::sin(w * t);
      out[2 * k + 1] = std::cos(w * t);
    }
  }

  /// Batched forward. x is B x dim (row per sample); returns B x dim.
  Matrix forward(const Matrix& x, std::span<const double> t, std::span<const int> labels = {},
                 Cache* cache = nullptr) const {
    const std::size_t batch = x.rows();
    detail::require_same_size(x.cols(), cfg_.dim, "VelocityNet::forward");
    detail::require_same_size(t.size(), batch, "VelocityNet::forward (times)");
    if (!labels.empty()) detail::require_same_size(labels.size(), batch, "VelocityNet::forward");

    Eigen::MatrixXd in(input_dim(), batch);
    std::vector<double> feat(2 * cfg_.time_freqs);
    for (std::size_t b = 0; b < batch; ++b) {
      auto row = x.row(b);
      for (std::size_t i = 0; i < cfg_.dim; ++i) in(i, b) = row[i];
      time_features(t[b], feat);
      for (std::size_t i = 0; i < feat.size(); ++i) in(cfg_.dim + i, b) = feat[i];
    }
    std::vector<int> idx(batch);
    for (std::size_t b = 0; b < batch; ++b) idx[b] = label_index(labels.empty() ? kNullLabel : labels[b]);

    Cache local;
    Cache& c = cache ? *cache : local;
    c.pre.clear();
    c.post.clear();
    c.labels = idx;
    c.post.push_back(std::move(in));

    const std::size_t last = layers_.size() - 1;
    Eigen::MatrixXd out;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Eigen::MatrixXd z = owned_weight(l) * c.post.back();
      z.colwise() += bias(l);
      if (l == 0 && cfg_.num_classes > 0) {
        const auto e = embedding();
        for (std::size_t b = 0; b < batch; ++b) z.col(b) += e.col(idx[b]);
      }
      if (l == last) {
        out = std::move(z);
        break;
      }
      Eigen::MatrixXd h = z.unaryExpr([](double v) { return v / (1.0 + std::exp(-v)); });
      c.pre.push_back(std::move(z));
      c.post.push_back(std::move(h));
    }

    Matrix result(batch, cfg_.dim);
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        result.data().data(), batch, cfg_.dim) = out.transpose();
    return result;
  }

  Vector forward_one(VecView x, double t, int label = kNullLabel) const {
    Matrix m(1, x.size(), Vector(x.begin(), x.end()));
    const double ts[1] = {t};
    const int ls[1] = {label};
    return forward(m, ts, ls).storage();
  }

  /// Accumulates d loss / d params into `grad` given d loss / d output (B x dim).
  void backward(const Cache& c, const Matrix& grad_out, std::span<double> grad) const {
    detail::require_same_size(grad.size(), params_.size(), "VelocityNet::backward");
    const std::size_t batch = grad_out.rows();
    Eigen::MatrixXd g = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                       Eigen::RowMajor>>(grad_out.data().data(),
                                                                         batch, cfg_.dim)
                            .transpose();
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const Layer& ly = layers_[l];
      MatMap gw(grad.data() + ly.w, ly.out, ly.in);
      VecMap gb(grad.data() + ly.b, ly.out);
      gw += Eigen::MatrixXd(g * c.post[l].transpose());
      gb += Eigen::VectorXd(g.rowwise().sum());
      if (l == 0) {
        if (cfg_.num_classes > 0) {
          MatMap ge(grad.data() + embed_, cfg_.hidden, cfg_.num_classes + 1);
          for (std::size_t b = 0; b < batch; ++b) ge.col(c.labels[b]) += g.col(b);
        }
        break;
      }
      Eigen::MatrixXd gh = owned_weight(l).transpose() * g;
      const Eigen::MatrixXd& z = c.pre[l - 1];
      g = gh.binaryExpr(z, [](double gv, double zv) {
        const double s = 1.0 / (1.0 + std::exp(-zv));
        return gv * s * (1.0 + zv * (1.0 - s));
      });
    }
  }

  int label_index(int label) const {
    if (label == kNullLabel) return static_cast<int>(cfg_.num_classes);
    if (label < 0 || static_cast<std::size_t>(label) >= cfg_.num_classes) {
      throw DomainError("VelocityNet: unknown class label " + std::to_string(label));
    }
    return label;
  }

 private:
  struct Layer {
    std::size_t in, out, w, b;
  };

  // Products run on owned (aligned) copies: Eigen's vectorized kernels choose their
  // summation order from pointer alignment, and offsets into params_ are arbitrary.
  Eigen::MatrixXd owned_weight(std::size_t l) const { return weight(l); }

  void layout() {
    if (cfg_.dim == 0 || cfg_.hidden == 0 || cfg_.depth == 0) {
      throw DomainError("VelocityNet: dim, hidden and depth must be positive");
    }
    layers_.clear();
    std::size_t off = 0;
    std::size_t in = input_dim();
    for (std::size_t l = 0; l <= cfg_.depth; ++l) {
      const std::size_t out = (l == cfg_.depth) ? cfg_.dim : cfg_.hidden;
      layers_.push_back({in, out, off, off + in * out});
      off += in * out + out;
      in = out;
    }
    embed_ = off;
    if (cfg_.num_classes > 0) off += cfg_.hidden * (cfg_.num_classes + 1);
    params_.assign(off, 0.0);
  }

  void initialize(Rng& rng) {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Layer& ly = layers_[l];
      if (l + 1 == layers_.size() && cfg_.zero_head) continue;
      const double sd = 1.0 / std::sqrt(static_cast<double>(ly.in));
      for (std::size_t i = 0; i < ly.in * ly.out; ++i) params_[ly.w + i] = sd * rng.normal();
    }
    if (cfg_.num_classes > 0) {
      for (std::size_t i = 0; i < cfg_.hidden * (cfg_.num_classes + 1); ++i)
        params_[embed_ + i] = 0.1 * rng.normal();
    }
  }

  NetConfig cfg_;
  std::vector<Layer> layers_;
  std::size_t embed_ = 0;
  std::vector<double> params_;
};

// ---- optimizer -------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t step = 0;

  explicit AdamState(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamState& st,
                      const AdamConfig& cfg) {
  detail::require_same_size(params.size(), grads.size(), "adam_step");
  detail::require_same_size(params.size(), st.m.size(), "adam_step (state)");
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
    const double mhat = st.m[i] / c1;
    const double vhat = st.v[i] / c2;
    params[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

/// ema <- decay * ema + (1 - decay) * params
inline void ema_update(std::span<double> ema, std::span<const double> params, double decay) {
  detail::require_same_size(ema.size(), params.size(), "ema_update");
  if (!(decay >= 0.0 && decay < 1.0)) throw DomainError("ema_update: decay outside [0, 1)");
  if (decay == 0.0) {
    std::copy(params.begin(), params.end(), ema.begin());
    return;
  }
  const double w = 1.0 - decay;
  for (std::size_t i = 0; i < ema.size(); ++i) ema[i] += w * (params[i] - ema[i]);
}

// ---- time sampling ---------------------------------------------------------

inline constexpr double kTimeFloor = 1e-3;

/// t = shift t0 / (1 + (shift - 1) t0).
inline double shift_time(double t0, double shift) {
  return shift * t0 / (1.0 + (shift - 1.0) * t0);
}

/// Logit-normal(0, 1) draw pushed through the flow shift, clipped to [1e-3, 1].
inline double sample_time(Rng& rng, double shift) {
  if (!(shift >= 1.0)) throw DomainError("sample_time: shift must be >= 1");
  const double n = rng.normal();
  const double t0 = 1.0 / (1.0 + std::exp(-n));
  return std::clamp(shift_time(t0, shift), kTimeFloor, 1.0);
}

}  // namespace asymflow
