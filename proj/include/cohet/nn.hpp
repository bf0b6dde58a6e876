#pragma once

// Dense multi-layer perceptrons with hand-written reverse mode, Adam, the MSE
// loss and a diagonal Gaussian policy head. Everything is float64.
//
// Batches are column-major: an input of shape (in_dim x B) holds B samples,
// one per column. Each column is processed by the same sequence of floating
// point operations regardless of its position in the batch.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cohet/rng.hpp"

namespace cohet::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { kReLU, kTanh };

struct MlpSpec {
  // Input dimension first, output dimension last.
  std::vector<int> layer_sizes;
  // Applied to hidden layers only; the output layer is linear.
  Activation activation = Activation::kReLU;

  void validate() const {
    if (layer_sizes.size() < 2) {
      throw std::invalid_argument("MlpSpec needs at least an input and an output size");
    }
    for (int s : layer_sizes) {
      if (s < 1) throw std::invalid_argument("MlpSpec layer sizes must be >= 1");
    }
  }

  bool operator==(const MlpSpec&) const = default;
};

struct Mlp {
  MlpSpec spec;
  std::vector<Matrix> weights;  // layer l: (out x in)
  std::vector<Vector> biases;   // layer l: (out)
  // Bumped on every in-place parameter change; forward caches record it.
  std::uint64_t revision = 0;

  int input_dim() const { return spec.layer_sizes.front(); }
  int output_dim() const { return spec.layer_sizes.back(); }
  int num_layers() const { return static_cast<int>(weights.size()); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
    }
    return n;
  }

  bool all_finite() const {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (!weights[l].allFinite() || !biases[l].allFinite()) return false;
    }
    return true;
  }
};

inline Mlp mlp_zeros(const MlpSpec& spec) {
  spec.validate();
  Mlp m;
  m.spec = spec;
  for (std::size_t l = 0; l + 1 < spec.layer_sizes.size(); ++l) {
    m.weights.push_back(Matrix::Zero(spec.layer_sizes[l + 1], spec.layer_sizes[l]));
    m.biases.push_back(Vector::Zero(spec.layer_sizes[l + 1]));
  }
  return m;
}

// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases.
inline Mlp mlp_init(const MlpSpec& spec, Rng& rng) {
  Mlp m = mlp_zeros(spec);
  for (auto& w : m.weights) {
    const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = dist(rng);
    }
  }
  return m;
}

inline Mlp mlp_init(const MlpSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  return mlp_init(spec, rng);
}

namespace detail {

inline void activate(Activation a, Matrix& x) {
  if (a == Activation::kReLU) {
    x = x.cwiseMax(0.0);
  } else {
    x = x.array().tanh().matrix();
  }
}

// Multiplies grad in place by the activation derivative at `pre`.
inline void activation_backward(Activation a, const Matrix& pre, Matrix& grad) {
  if (a == Activation::kReLU) {
    grad = (pre.array() > 0.0).select(grad, 0.0);
  } else {
    grad = (grad.array() * (1.0 - pre.array().tanh().square())).matrix();
  }
}

inline void check_input(const Mlp& m, const Matrix& input) {
  if (input.rows() != m.input_dim()) {
    throw std::invalid_argument("mlp input has " + std::to_string(input.rows()) +
                                " rows, expected " + std::to_string(m.input_dim()));
  }
}

}  // namespace detail

struct MlpCache {
  const Mlp* owner = nullptr;
  std::uint64_t revision = 0;
  std::vector<Matrix> layer_inputs;  // input to each layer (post-activation of previous)
  std::vector<Matrix> pre_activations;
};

struct MlpForward {
  Matrix output;
  MlpCache cache;
};

// Forward pass without keeping activations.
inline Matrix mlp_apply(const Mlp& m, const Matrix& input) {
  detail::check_input(m, input);
  Matrix x = input;
  for (int l = 0; l < m.num_layers(); ++l) {
    Matrix y = m.weights[l] * x;
    y.colwise() += m.biases[l];
    if (l + 1 < m.num_layers()) detail::activate(m.spec.activation, y);
    x = std::move(y);
  }
  return x;
}

inline Vector mlp_apply_one(const Mlp& m, const Vector& input) {
  Matrix in = input;
  return mlp_apply(m, in).col(0);
}

inline MlpForward mlp_forward(const Mlp& m, const Matrix& input) {
  detail::check_input(m, input);
  MlpForward out;
  out.cache.owner = &m;
  out.cache.revision = m.revision;
  Matrix x = input;
  for (int l = 0; l < m.num_layers(); ++l) {
    Matrix y = m.weights[l] * x;
    y.colwise() += m.biases[l];
    out.cache.layer_inputs.push_back(std::move(x));
    if (l + 1 < m.num_layers()) {
      out.cache.pre_activations.push_back(y);
      detail::activate(m.spec.activation, y);
    }
    x = std::move(y);
  }
  out.output = std::move(x);
  return out;
}

struct MlpGrad {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  static MlpGrad zeros_like(const Mlp& m) {
    MlpGrad g;
    for (int l = 0; l < m.num_layers(); ++l) {
      g.weights.push_back(Matrix::Zero(m.weights[l].rows(), m.weights[l].cols()));
      g.biases.push_back(Vector::Zero(m.biases[l].size()));
    }
    return g;
  }

  void set_zero() {
    for (auto& w : weights) w.setZero();
    for (auto& b : biases) b.setZero();
  }

  MlpGrad& operator+=(const MlpGrad& o) {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      weights[l] += o.weights[l];
      biases[l] += o.biases[l];
    }
    return *this;
  }
};

// Reverse mode for sum over columns of <output, grad_output>. Parameter
// gradients are accumulated into `grad`; the input gradient is returned.
inline Matrix mlp_backward(const Mlp& m, const MlpCache& cache, const Matrix& grad_output,
                           MlpGrad& grad) {
  if (cache.owner != &m || cache.revision != m.revision) {
    throw std::invalid_argument("mlp_backward: cache does not belong to these parameters");
  }
  if (static_cast<int>(cache.layer_inputs.size()) != m.num_layers() ||
      grad_output.rows() != m.output_dim() ||
      grad_output.cols() != cache.layer_inputs.front().cols()) {
    throw std::invalid_argument("mlp_backward: cache/grad_output shape mismatch");
  }
  if (grad.weights.size() != m.weights.size()) grad = MlpGrad::zeros_like(m);
  Matrix g = grad_output;
  for (int l = m.num_layers() - 1; l >= 0; --l) {
    if (l + 1 < m.num_layers()) {
      detail::activation_backward(m.spec.activation, cache.pre_activations[l], g);
    }
    grad.weights[l].noalias() += g * cache.layer_inputs[l].transpose();
    grad.biases[l] += g.rowwise().sum();
    Matrix next = m.weights[l].transpose() * g;
    g = std::move(next);
  }
  return g;
}

struct MlpBackward {
  MlpGrad grad_params;
  Matrix grad_input;
};

inline MlpBackward mlp_backward(const Mlp& m, const MlpCache& cache, const Matrix& grad_output) {
  MlpBackward out;
  out.grad_params = MlpGrad::zeros_like(m);
  out.grad_input = mlp_backward(m, cache, grad_output, out.grad_params);
  return out;
}

// ---------------------------------------------------------------------------
// Adam over an ordered list of flat parameter blocks.

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;

  AdamState() = default;
  explicit AdamState(AdamConfig c) : config(c) {}
};

using ParamBlocks = std::vector<std::span<double>>;
using GradBlocks = std::vector<std::span<const double>>;

inline void append_blocks(Mlp& m, ParamBlocks& out) {
  for (int l = 0; l < m.num_layers(); ++l) {
    out.emplace_back(m.weights[l].data(), static_cast<std::size_t>(m.weights[l].size()));
    out.emplace_back(m.biases[l].data(), static_cast<std::size_t>(m.biases[l].size()));
  }
}

inline void append_blocks(const MlpGrad& g, GradBlocks& out) {
  for (std::size_t l = 0; l < g.weights.size(); ++l) {
    out.emplace_back(g.weights[l].data(), static_cast<std::size_t>(g.weights[l].size()));
    out.emplace_back(g.biases[l].data(), static_cast<std::size_t>(g.biases[l].size()));
  }
}

inline void adam_update(const ParamBlocks& params, const GradBlocks& grads, AdamState& state) {
  if (params.size() != grads.size()) throw std::invalid_argument("adam: block count mismatch");
  std::size_t total = 0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != grads[b].size()) {
      throw std::invalid_argument("adam: block " + std::to_string(b) + " size mismatch");
    }
    for (std::size_t k = 0; k < grads[b].size(); ++k) {
      if (!std::isfinite(grads[b][k])) {
        throw std::runtime_error("adam: non-finite gradient in block " + std::to_string(b) +
                                 " at element " + std::to_string(k));
      }
    }
    total += params[b].size();
  }
  if (state.m.empty()) {
    state.m.assign(total, 0.0);
    state.v.assign(total, 0.0);
  } else if (state.m.size() != total) {
    throw std::invalid_argument("adam: state size does not match parameters");
  }
  const AdamConfig& c = state.config;
  ++state.step;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  std::size_t off = 0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    for (std::size_t k = 0; k < params[b].size(); ++k, ++off) {
      const double g = grads[b][k];
      double& m = state.m[off];
      double& v = state.v[off];
      m = c.beta1 * m + (1.0 - c.beta1) * g;
      v = c.beta2 * v + (1.0 - c.beta2) * g * g;
      const double m_hat = m / bc1;
      const double v_hat = v / bc2;
      params[b][k] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

inline void adam_step(Mlp& m, const MlpGrad& g, AdamState& state) {
  ParamBlocks p;
  GradBlocks gb;
  append_blocks(m, p);
  append_blocks(g, gb);
  adam_update(p, gb, state);
  ++m.revision;
}

// ---------------------------------------------------------------------------
// Losses

struct LossAndGrad {
  double loss = 0.0;
  Matrix grad;
};

// Mean over every element of (pred - target)^2.
inline LossAndGrad mse_loss(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw std::invalid_argument("mse_loss: shape mismatch");
  }
  const double n = static_cast<double>(pred.size());
  if (n == 0) throw std::invalid_argument("mse_loss: empty input");
  LossAndGrad out;
  Matrix diff = pred - target;
  out.loss = diff.squaredNorm() / n;
  out.grad = (2.0 / n) * diff;
  return out;
}

// ---------------------------------------------------------------------------
// Diagonal Gaussian head with a state-independent log standard deviation.

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

inline Vector clamp_log_std(const Vector& log_std) {
  return log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
}

namespace detail {
inline void check_head(const Vector& mean, const Vector& log_std) {
  if (mean.size() != log_std.size()) throw std::invalid_argument("gaussian: dim mismatch");
  if (!mean.allFinite()) throw std::invalid_argument("gaussian: non-finite mean");
}
}  // namespace detail

inline Vector gaussian_sample(const Vector& mean, const Vector& log_std, Rng& rng) {
  detail::check_head(mean, log_std);
  const Vector ls = clamp_log_std(log_std);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector a(mean.size());
  for (Eigen::Index k = 0; k < mean.size(); ++k) a[k] = mean[k] + std::exp(ls[k]) * normal(rng);
  return a;
}

inline double gaussian_log_prob(const Vector& mean, const Vector& log_std, const Vector& action) {
  detail::check_head(mean, log_std);
  const Vector ls = clamp_log_std(log_std);
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  double lp = 0.0;
  for (Eigen::Index k = 0; k < mean.size(); ++k) {
    const double z = (action[k] - mean[k]) * std::exp(-ls[k]);
    lp += -0.5 * z * z - ls[k] - half_log_2pi;
  }
  return lp;
}

inline double gaussian_entropy(const Vector& log_std) {
  const Vector ls = clamp_log_std(log_std);
  const double per_dim = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  return ls.sum() + per_dim * static_cast<double>(ls.size());
}

struct GaussianLogProbGrad {
  Vector d_mean;
  Vector d_log_std;
};

// Gradient of log_prob with respect to the mean and the (already clamped)
// log standard deviation.
inline GaussianLogProbGrad gaussian_log_prob_grad(const Vector& mean, const Vector& log_std,
                                                  const Vector& action) {
  detail::check_head(mean, log_std);
  const Vector ls = clamp_log_std(log_std);
  GaussianLogProbGrad g{Vector(mean.size()), Vector(mean.size())};
  for (Eigen::Index k = 0; k < mean.size(); ++k) {
    const double inv_var = std::exp(-2.0 * ls[k]);
    const double d = action[k] - mean[k];
    g.d_mean[k] = d * inv_var;
    g.d_log_std[k] = d * d * inv_var - 1.0;
  }
  return g;
}

}  // namespace cohet::nn
