#pragma once

// Dense multilayer perceptrons with analytic backprop, Adam and soft target
// updates. Batches are column-major: one column per sample.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace emac::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Activation : std::uint32_t {
  identity = 0,
  relu = 1,
  scaled_tanh = 2,  // scale * tanh(z), used for bounded actor outputs
};

struct Layer {
  Matrix weight;  // out x in
  Vector bias;    // out
  Activation activation = Activation::identity;
  double scale = 1.0;  // only read by scaled_tanh

  Eigen::Index in() const { return weight.cols(); }
  Eigen::Index out() const { return weight.rows(); }
};

/// Weights and biases of a feed-forward network. `revision` is bumped by
/// every in-library mutation so a forward cache can detect that the
/// parameters moved underneath it.
struct Network {
  std::vector<Layer> layers;
  std::uint64_t revision = 0;

  Eigen::Index input_dim() const { return layers.front().in(); }
  Eigen::Index output_dim() const { return layers.back().out(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  void validate() const {
    if (layers.empty()) throw std::invalid_argument("network has no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.bias.size() != l.out())
        throw std::invalid_argument("layer " + std::to_string(i) + ": bias length != output width");
      if (i > 0 && l.in() != layers[i - 1].out())
        throw std::invalid_argument("layer " + std::to_string(i) + ": input width does not chain");
    }
  }
};

inline bool same_shape(const Network& a, const Network& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].in() != b.layers[i].in() || a.layers[i].out() != b.layers[i].out()) return false;
  }
  return true;
}

inline bool all_finite(const Network& net) {
  for (const auto& l : net.layers) {
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

/// Builds a network with widths sizes[0] -> sizes[1] -> ... -> sizes.back().
/// Hidden layers use `hidden`; the last layer uses `output` (with `output_scale`
/// for scaled_tanh). Every weight and bias is drawn uniformly from
/// +-1/sqrt(fan_in).
inline Network make_mlp(std::span<const int> sizes, Activation hidden, Activation output,
                        double output_scale, std::mt19937_64& rng) {
  if (sizes.size() < 2) throw std::invalid_argument("make_mlp needs at least two widths");
  Network net;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    if (sizes[i] < 1 || sizes[i + 1] < 1) throw std::invalid_argument("layer widths must be >= 1");
    const double bound = 1.0 / std::sqrt(static_cast<double>(sizes[i]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Layer layer;
    layer.weight.resize(sizes[i + 1], sizes[i]);
    layer.bias.resize(sizes[i + 1]);
    // Row-major fill so the draw order matches the checkpoint layout.
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = dist(rng);
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) layer.bias(r) = dist(rng);
    const bool last = i + 2 == sizes.size();
    layer.activation = last ? output : hidden;
    layer.scale = last ? output_scale : 1.0;
    net.layers.push_back(std::move(layer));
  }
  return net;
}

/// Everything backward() needs from a forward pass.
struct ForwardCache {
  std::vector<Matrix> inputs;       // input to each layer
  std::vector<Matrix> preactivations;
  Matrix output;
  std::uint64_t revision = 0;
};

namespace detail {

inline void activate(const Layer& layer, const Matrix& z, Matrix& out) {
  switch (layer.activation) {
    case Activation::identity:
      out = z;
      break;
    case Activation::relu:
      out = z.cwiseMax(0.0);
      break;
    case Activation::scaled_tanh:
      out = layer.scale * z.array().tanh();
      break;
  }
}

// Multiplies the upstream gradient by the activation derivative in place.
inline void activation_backward(const Layer& layer, const Matrix& z, Matrix& grad) {
  switch (layer.activation) {
    case Activation::identity:
      break;
    case Activation::relu:
      grad = (z.array() > 0.0).select(grad, 0.0);
      break;
    case Activation::scaled_tanh:
      grad.array() *= layer.scale * (1.0 - z.array().tanh().square());
      break;
  }
}

}  // namespace detail

inline ForwardCache forward(const Network& net, const Matrix& input) {
  if (net.layers.empty()) throw std::invalid_argument("forward: empty network");
  if (input.rows() != net.input_dim())
    throw std::invalid_argument("forward: input has " + std::to_string(input.rows()) +
                                " rows, network expects " + std::to_string(net.input_dim()));
  ForwardCache cache;
  cache.revision = net.revision;
  cache.inputs.reserve(net.layers.size());
  cache.preactivations.reserve(net.layers.size());
  Matrix x = input;
  for (const auto& layer : net.layers) {
    Matrix z(layer.out(), x.cols());
    z.noalias() = layer.weight * x;
    z.colwise() += layer.bias;
    cache.inputs.push_back(std::move(x));
    detail::activate(layer, z, x);
    cache.preactivations.push_back(std::move(z));
  }
  cache.output = std::move(x);
  return cache;
}

/// Output only; no cache kept.
inline Matrix predict(const Network& net, const Matrix& input) {
  if (input.rows() != net.input_dim()) throw std::invalid_argument("predict: input dimension mismatch");
  Matrix x = input;
  Matrix z;
  for (const auto& layer : net.layers) {
    z.resize(layer.out(), x.cols());
    z.noalias() = layer.weight * x;
    z.colwise() += layer.bias;
    detail::activate(layer, z, x);
  }
  return x;
}

inline Vector predict_one(const Network& net, std::span<const double> input) {
  Eigen::Map<const Vector> x(input.data(), static_cast<Eigen::Index>(input.size()));
  return predict(net, Matrix(x));
}

/// Per-layer gradients shaped like a Network.
struct Gradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;

  static Gradients zeros_like(const Network& net) {
    Gradients g;
    for (const auto& l : net.layers) {
      g.weight.push_back(Matrix::Zero(l.out(), l.in()));
      g.bias.push_back(Vector::Zero(l.out()));
    }
    return g;
  }

  void set_zero() {
    for (auto& w : weight) w.setZero();
    for (auto& b : bias) b.setZero();
  }

  Gradients& operator+=(const Gradients& other) {
    if (other.weight.size() != weight.size()) throw std::invalid_argument("gradient shape mismatch");
    for (std::size_t i = 0; i < weight.size(); ++i) {
      weight[i] += other.weight[i];
      bias[i] += other.bias[i];
    }
    return *this;
  }

  bool all_finite() const {
    for (std::size_t i = 0; i < weight.size(); ++i)
      if (!weight[i].allFinite() || !bias[i].allFinite()) return false;
    return true;
  }

  bool matches(const Network& net) const {
    if (weight.size() != net.layers.size() || bias.size() != net.layers.size()) return false;
    for (std::size_t i = 0; i < weight.size(); ++i) {
      const auto& l = net.layers[i];
      if (weight[i].rows() != l.out() || weight[i].cols() != l.in() || bias[i].size() != l.out())
        return false;
    }
    return true;
  }
};

struct BackwardResult {
  Gradients params;
  Matrix input;  // d loss / d input, same shape as the forward input
};

namespace detail {

inline void check_cache(const Network& net, const ForwardCache& cache, const Matrix& output_grad) {
  if (cache.revision != net.revision || cache.inputs.size() != net.layers.size())
    throw std::invalid_argument("backward: cache is stale or belongs to another network");
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (cache.inputs[i].rows() != net.layers[i].in() || cache.preactivations[i].rows() != net.layers[i].out())
      throw std::invalid_argument("backward: cache shapes do not match the network");
  }
  if (output_grad.rows() != net.output_dim() || output_grad.cols() != cache.output.cols())
    throw std::invalid_argument("backward: output gradient shape mismatch");
}

template <bool WithParams>
inline BackwardResult backward_impl(const Network& net, const ForwardCache& cache, const Matrix& output_grad) {
  check_cache(net, cache, output_grad);
  BackwardResult result;
  if constexpr (WithParams) {
    result.params.weight.resize(net.layers.size());
    result.params.bias.resize(net.layers.size());
  }
  Matrix grad = output_grad;
  for (std::size_t idx = net.layers.size(); idx-- > 0;) {
    const auto& layer = net.layers[idx];
    activation_backward(layer, cache.preactivations[idx], grad);
    if constexpr (WithParams) {
      result.params.weight[idx].noalias() = grad * cache.inputs[idx].transpose();
      result.params.bias[idx] = grad.rowwise().sum();
    }
    Matrix upstream(layer.in(), grad.cols());
    upstream.noalias() = layer.weight.transpose() * grad;
    grad = std::move(upstream);
  }
  result.input = std::move(grad);
  return result;
}

}  // namespace detail

/// Gradients of a scalar loss w.r.t. parameters and input, given dLoss/dOutput.
inline BackwardResult backward(const Network& net, const ForwardCache& cache, const Matrix& output_grad) {
  return detail::backward_impl<true>(net, cache, output_grad);
}

/// Input gradient only; skips the weight-gradient products.
inline Matrix backward_input(const Network& net, const ForwardCache& cache, const Matrix& output_grad) {
  return detail::backward_impl<false>(net, cache, output_grad).input;
}

struct AdamState {
  Gradients first_moment;
  Gradients second_moment;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  static AdamState for_network(const Network& net) {
    AdamState s;
    s.first_moment = Gradients::zeros_like(net);
    s.second_moment = Gradients::zeros_like(net);
    return s;
  }
};

/// One bias-corrected Adam step. Parameters are only committed if every
/// updated value is finite.
inline void adam_step(Network& net, const Gradients& grads, AdamState& state, double lr) {
  if (!(lr > 0.0)) throw std::invalid_argument("adam_step: learning rate must be > 0");
  if (!grads.matches(net) || !state.first_moment.matches(net) || !state.second_moment.matches(net))
    throw std::invalid_argument("adam_step: gradient/optimizer shapes do not match the network");
  if (!grads.all_finite()) throw NonFiniteError("adam_step: non-finite gradient");

  const auto t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  const double b1 = state.beta1, b2 = state.beta2, eps = state.epsilon;

  auto m = state.first_moment;
  auto v = state.second_moment;
  std::vector<Matrix> new_w(net.layers.size());
  std::vector<Vector> new_b(net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    m.weight[i] = b1 * m.weight[i] + (1.0 - b1) * grads.weight[i];
    v.weight[i] = b2 * v.weight[i] + (1.0 - b2) * grads.weight[i].cwiseProduct(grads.weight[i]);
    m.bias[i] = b1 * m.bias[i] + (1.0 - b1) * grads.bias[i];
    v.bias[i] = b2 * v.bias[i] + (1.0 - b2) * grads.bias[i].cwiseProduct(grads.bias[i]);
    new_w[i] = net.layers[i].weight.array() -
               lr * (m.weight[i].array() / c1) / ((v.weight[i].array() / c2).sqrt() + eps);
    new_b[i] = net.layers[i].bias.array() -
               lr * (m.bias[i].array() / c1) / ((v.bias[i].array() / c2).sqrt() + eps);
    if (!new_w[i].allFinite() || !new_b[i].allFinite())
      throw NonFiniteError("adam_step: update would produce a non-finite parameter");
  }
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    net.layers[i].weight = std::move(new_w[i]);
    net.layers[i].bias = std::move(new_b[i]);
  }
  state.first_moment = std::move(m);
  state.second_moment = std::move(v);
  ++state.step;
  ++net.revision;
}

/// target <- tau * online + (1 - tau) * target, elementwise.
inline void soft_update(Network& target, const Network& online, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("soft_update: tau must be in [0, 1]");
  if (!same_shape(target, online)) throw std::invalid_argument("soft_update: shape mismatch");
  auto blend = [tau](double t, double o) {
    // Clamped so rounding can never push the result outside [t, o].
    return std::clamp(tau * o + (1.0 - tau) * t, std::min(t, o), std::max(t, o));
  };
  for (std::size_t i = 0; i < target.layers.size(); ++i) {
    auto& tl = target.layers[i];
    const auto& ol = online.layers[i];
    tl.weight = tl.weight.binaryExpr(ol.weight, blend);
    tl.bias = tl.bias.binaryExpr(ol.bias, blend);
  }
  ++target.revision;
}

// --- Checkpoint format -----------------------------------------------------
// u32 layer_count, then per layer u32 out, u32 in; then per layer the weight
// matrix row-major followed by the bias, each value a little-endian IEEE-754
// binary64. Activations are not stored: load into a network of known
// architecture.

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  os.write(b, 8);
}

inline void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  static_assert(sizeof bits == sizeof v);
  std::memcpy(&bits, &v, sizeof v);
  write_u64(os, bits);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("unexpected end of stream");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("unexpected end of stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline double read_f64(std::istream& is) {
  const std::uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

}  // namespace detail

inline void write_parameters(std::ostream& os, const Network& net) {
  detail::write_u32(os, static_cast<std::uint32_t>(net.layers.size()));
  for (const auto& l : net.layers) {
    detail::write_u32(os, static_cast<std::uint32_t>(l.out()));
    detail::write_u32(os, static_cast<std::uint32_t>(l.in()));
  }
  for (const auto& l : net.layers) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) detail::write_f64(os, l.weight(r, c));
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) detail::write_f64(os, l.bias(r));
  }
}

/// Reads parameters into `net`, whose architecture must match the stream.
inline void read_parameters(std::istream& is, Network& net) {
  const auto count = detail::read_u32(is);
  if (count != net.layers.size()) throw std::runtime_error("checkpoint layer count mismatch");
  for (const auto& l : net.layers) {
    const auto out = detail::read_u32(is);
    const auto in = detail::read_u32(is);
    if (out != l.out() || in != l.in()) throw std::runtime_error("checkpoint layer shape mismatch");
  }
  Network loaded = net;
  for (auto& l : loaded.layers) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = detail::read_f64(is);
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = detail::read_f64(is);
  }
  if (!all_finite(loaded)) throw NonFiniteError("checkpoint contains non-finite parameters");
  loaded.revision = net.revision + 1;
  net = std::move(loaded);
}

}  // namespace emac::nn
