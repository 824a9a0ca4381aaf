#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "bodymetric/errors.hpp"
#include "bodymetric/rng.hpp"

namespace bodymetric {

using Vector = std::vector<double>;
using Prob2 = std::array<double, 2>;

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // row-major

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  bool operator==(const Matrix&) const = default;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// ---------------------------------------------------------------------------
// Activations

enum class Activation { gelu, relu, identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::gelu: return "gelu";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "identity";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw DataError("unknown activation '" + s + "'");
}

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::gelu: return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::identity: return x;
  }
  return x;
}

inline double activate_derivative(Activation a, double x) {
  switch (a) {
    case Activation::gelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
      const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
      return cdf + x * pdf;
    }
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// Multilayer perceptron

struct MlpSpec {
  std::vector<std::size_t> layer_dims;  // input, hidden..., output
  Activation activation = Activation::gelu;

  void validate() const {
    if (layer_dims.size() < 2) throw ShapeError("MLP needs at least an input and an output dimension");
    for (std::size_t i = 0; i < layer_dims.size(); ++i) {
      if (layer_dims[i] == 0) throw ShapeError("MLP layer " + std::to_string(i) + " has zero width");
    }
  }

  std::size_t num_layers() const { return layer_dims.size() - 1; }
  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t output_dim() const { return layer_dims.back(); }
};

namespace detail {
inline std::uint64_t next_revision() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

struct MlpLayer {
  Matrix weight;  // out x in
  Vector bias;    // out

  bool operator==(const MlpLayer&) const = default;
};

struct MlpParams {
  std::vector<MlpLayer> layers;
  // Identifies the parameter values a tape was recorded against; changes on every mutation.
  std::uint64_t revision = detail::next_revision();

  void touch() { revision = detail::next_revision(); }

  static MlpParams zeros(const MlpSpec& spec) {
    spec.validate();
    MlpParams p;
    for (std::size_t l = 0; l < spec.num_layers(); ++l) {
      p.layers.push_back({Matrix(spec.layer_dims[l + 1], spec.layer_dims[l]), Vector(spec.layer_dims[l + 1], 0.0)});
    }
    return p;
  }

  // Uniform in +-sqrt(6 / (fan_in + fan_out)), zero biases.
  static MlpParams glorot(const MlpSpec& spec, Rng& rng) {
    MlpParams p = zeros(spec);
    for (auto& layer : p.layers) {
      const double limit = std::sqrt(6.0 / static_cast<double>(layer.weight.rows + layer.weight.cols));
      for (double& w : layer.weight.data) w = rng.uniform(-limit, limit);
    }
    return p;
  }

  void check_matches(const MlpSpec& spec) const {
    if (layers.size() != spec.num_layers()) {
      throw ShapeError("MLP parameters have " + std::to_string(layers.size()) + " layers, spec expects " +
                       std::to_string(spec.num_layers()));
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& layer = layers[l];
      if (layer.weight.rows != spec.layer_dims[l + 1] || layer.weight.cols != spec.layer_dims[l] ||
          layer.bias.size() != spec.layer_dims[l + 1] ||
          layer.weight.data.size() != layer.weight.rows * layer.weight.cols) {
        throw ShapeError("MLP layer " + std::to_string(l) + " parameter shape does not match spec");
      }
    }
  }

  void set_zero() {
    for (auto& layer : layers) {
      std::fill(layer.weight.data.begin(), layer.weight.data.end(), 0.0);
      std::fill(layer.bias.begin(), layer.bias.end(), 0.0);
    }
  }

  void add(const MlpParams& other) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& w = layers[l].weight.data;
      const auto& ow = other.layers[l].weight.data;
      for (std::size_t i = 0; i < w.size(); ++i) w[i] += ow[i];
      auto& b = layers[l].bias;
      const auto& ob = other.layers[l].bias;
      for (std::size_t i = 0; i < b.size(); ++i) b[i] += ob[i];
    }
  }

  // Revision is bookkeeping, not value.
  bool operator==(const MlpParams& o) const { return layers == o.layers; }
};

struct MlpTape {
  std::uint64_t revision = 0;
  std::vector<Vector> inputs;       // input to each layer
  std::vector<Vector> preactivations;
};

struct MlpForward {
  Vector output;
  MlpTape tape;
};

inline MlpForward mlp_forward(const MlpSpec& spec, const MlpParams& params, std::span<const double> input) {
  params.check_matches(spec);
  if (input.size() != spec.input_dim()) {
    throw ShapeError("MLP input has length " + std::to_string(input.size()) + ", layer 0 expects " +
                     std::to_string(spec.input_dim()));
  }
  MlpForward fwd;
  fwd.tape.revision = params.revision;
  Vector current(input.begin(), input.end());
  const std::size_t n = spec.num_layers();
  for (std::size_t l = 0; l < n; ++l) {
    const auto& layer = params.layers[l];
    Vector pre(layer.weight.rows);
    for (std::size_t r = 0; r < layer.weight.rows; ++r) {
      pre[r] = dot(layer.weight.row(r), current) + layer.bias[r];
    }
    Vector out(pre.size());
    const Activation act = (l + 1 == n) ? Activation::identity : spec.activation;
    for (std::size_t r = 0; r < pre.size(); ++r) out[r] = activate(act, pre[r]);
    fwd.tape.inputs.push_back(std::move(current));
    fwd.tape.preactivations.push_back(std::move(pre));
    current = std::move(out);
  }
  fwd.output = std::move(current);
  return fwd;
}

// Adds d(upstream . output)/d(params) into `grads` and returns the input gradient.
inline Vector mlp_backward_accumulate(const MlpSpec& spec, const MlpParams& params, const MlpTape& tape,
                                      std::span<const double> upstream, MlpParams& grads) {
  if (tape.revision != params.revision || tape.inputs.size() != spec.num_layers() ||
      tape.preactivations.size() != spec.num_layers()) {
    throw ContractError("MLP tape does not belong to these parameters (stale or mismatched)");
  }
  if (upstream.size() != spec.output_dim()) {
    throw ContractError("upstream gradient has length " + std::to_string(upstream.size()) + ", expected " +
                        std::to_string(spec.output_dim()));
  }
  grads.check_matches(spec);
  const std::size_t n = spec.num_layers();
  Vector delta(upstream.begin(), upstream.end());
  for (std::size_t li = n; li-- > 0;) {
    const auto& layer = params.layers[li];
    auto& g = grads.layers[li];
    const Activation act = (li + 1 == n) ? Activation::identity : spec.activation;
    const Vector& pre = tape.preactivations[li];
    if (act != Activation::identity) {
      for (std::size_t r = 0; r < delta.size(); ++r) delta[r] *= activate_derivative(act, pre[r]);
    }
    const Vector& in = tape.inputs[li];
    Vector next(layer.weight.cols, 0.0);
    for (std::size_t r = 0; r < layer.weight.rows; ++r) {
      const double d = delta[r];
      g.bias[r] += d;
      if (d == 0.0) continue;
      auto grow = g.weight.row(r);
      auto wrow = layer.weight.row(r);
      for (std::size_t c = 0; c < layer.weight.cols; ++c) {
        grow[c] += d * in[c];
        next[c] += d * wrow[c];
      }
    }
    delta = std::move(next);
  }
  return delta;
}

struct MlpBackward {
  MlpParams param_grads;
  Vector input_grad;
};

inline MlpBackward mlp_backward(const MlpSpec& spec, const MlpParams& params, const MlpTape& tape,
                                std::span<const double> upstream) {
  MlpBackward out{MlpParams::zeros(spec), {}};
  out.input_grad = mlp_backward_accumulate(spec, params, tape, upstream, out.param_grads);
  return out;
}

// ---------------------------------------------------------------------------
// Pairwise softmax and the preference KL

inline Prob2 softmax2(double a, double b) {
  const double m = std::max(a, b);
  const double ea = std::exp(a - m);
  const double eb = std::exp(b - m);
  const double z = ea + eb;
  return {ea / z, eb / z};
}

inline bool is_allowed_preference(const Prob2& p) {
  return (p[0] == 1.0 && p[1] == 0.0) || (p[0] == 0.0 && p[1] == 1.0) || (p[0] == 0.5 && p[1] == 0.5);
}

struct PreferenceLoss {
  double loss = 0.0;
  Prob2 grad_wrt_logits{0.0, 0.0};
};

inline PreferenceLoss kl_preference_loss(const Prob2& p, const Prob2& p_hat) {
  if (!is_allowed_preference(p)) throw DomainError("preference must be [1,0], [0,1] or [0.5,0.5]");
  PreferenceLoss out;
  for (int i = 0; i < 2; ++i) {
    if (p[i] > 0.0) out.loss += p[i] * (std::log(p[i]) - std::log(p_hat[i]));
    out.grad_wrt_logits[i] = p_hat[i] - p[i];
  }
  return out;
}

// Same quantity evaluated through log-sum-exp, finite for any finite logits.
inline PreferenceLoss kl_preference_loss_from_logits(const Prob2& p, double logit_1, double logit_2) {
  if (!is_allowed_preference(p)) throw DomainError("preference must be [1,0], [0,1] or [0.5,0.5]");
  const double m = std::max(logit_1, logit_2);
  const double log_z = std::log(std::exp(logit_1 - m) + std::exp(logit_2 - m));
  const std::array<double, 2> log_p_hat{(logit_1 - m) - log_z, (logit_2 - m) - log_z};
  const Prob2 p_hat = softmax2(logit_1, logit_2);
  PreferenceLoss out;
  for (int i = 0; i < 2; ++i) {
    if (p[i] > 0.0) out.loss += p[i] * (std::log(p[i]) - log_p_hat[i]);
    out.grad_wrt_logits[i] = p_hat[i] - p[i];
  }
  out.loss = std::max(out.loss, 0.0);
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule

// A flat window onto one parameter tensor.
struct ParamView {
  std::span<double> values;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool decay = true;  // weight decay applies
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  bool operator==(const AdamWConfig&) const = default;
};

struct OptimState {
  AdamWConfig config;
  std::uint64_t step = 0;
  std::vector<Vector> first_moment;
  std::vector<Vector> second_moment;

  explicit OptimState(AdamWConfig cfg = {}) : config(cfg) {}
};

inline void adamw_step(std::span<const ParamView> params, std::span<const ParamView> grads, OptimState& state,
                       double lr) {
  if (params.size() != grads.size()) throw ContractError("parameter and gradient tensor counts differ");
  if (!(lr >= 0.0)) throw ContractError("learning rate must be non-negative");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.values.size(), 0.0);
      state.second_moment.emplace_back(p.values.size(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) throw ContractError("optimizer state does not match parameters");
  for (std::size_t t = 0; t < params.size(); ++t) {
    if (params[t].values.size() != grads[t].values.size() || state.first_moment[t].size() != params[t].values.size()) {
      throw ContractError("shape mismatch in tensor " + std::to_string(t));
    }
    for (std::size_t i = 0; i < grads[t].values.size(); ++i) {
      if (!std::isfinite(grads[t].values[i])) {
        throw NumericError("non-finite gradient in tensor " + std::to_string(t) + " element " + std::to_string(i));
      }
    }
  }

  const auto& cfg = state.config;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto values = params[t].values;
    auto g = grads[t].values;
    auto& m = state.first_moment[t];
    auto& v = state.second_moment[t];
    const double decay = params[t].decay ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      values[i] -= lr * decay * values[i];
      values[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

struct ScheduleConfig {
  double peak_lr = 3e-6;
  std::size_t warmup_steps = 500;
  std::size_t total_steps = 4000;
};

// Linear warmup to peak, then linear decay to exactly zero at total_steps.
inline double lr_at_step(std::size_t step, const ScheduleConfig& cfg) {
  if (cfg.warmup_steps >= cfg.total_steps) throw ContractError("warmup must be shorter than the schedule");
  if (step > cfg.total_steps) throw ContractError("step beyond the end of the schedule");
  if (step < cfg.warmup_steps) {
    return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  return cfg.peak_lr * static_cast<double>(cfg.total_steps - step) /
         static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

// ---------------------------------------------------------------------------
// Cosine similarity with its gradient

struct CosineGrad {
  double cosine = 0.0;
  Vector grad_a;
  Vector grad_b;
};

inline CosineGrad cosine_with_grad(std::span<const double> a, std::span<const double> b) {
  const double na = l2_norm(a);
  const double nb = l2_norm(b);
  if (na == 0.0 || nb == 0.0) throw DegenerateEmbeddingError("cosine of a zero-norm embedding");
  CosineGrad out;
  const double ab = dot(a, b);
  out.cosine = ab / (na * nb);
  out.grad_a.resize(a.size());
  out.grad_b.resize(b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.grad_a[i] = b[i] / (na * nb) - out.cosine * a[i] / (na * na);
    out.grad_b[i] = a[i] / (na * nb) - out.cosine * b[i] / (nb * nb);
  }
  return out;
}

}  // namespace bodymetric
