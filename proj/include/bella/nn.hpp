#pragma once

// Multi-layer perceptron with hand-written reverse mode.
//
// Batches are rows, features are columns. A dense layer maps an activation
// block X (batch x in_dim) to act(X W^T + b) with W stored out_dim x in_dim.

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bella/linalg.hpp"
#include "bella/rng.hpp"

namespace bella {

enum class Activation { tanh, relu, identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(std::string_view name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  throw std::invalid_argument("unknown activation '" + std::string(name) +
                              "' (expected tanh, relu or identity)");
}

struct LayerSpec {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  Activation activation = Activation::tanh;

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct DenseLayer {
  Matrix weight;  // out_dim x in_dim
  std::vector<double> bias;
  Activation activation = Activation::tanh;

  LayerSpec spec() const { return {weight.cols(), weight.rows(), activation}; }

  friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

struct MlpModel {
  std::vector<DenseLayer> layers;

  std::size_t input_dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
  std::size_t output_dim() const { return layers.empty() ? 0 : layers.back().weight.rows(); }

  std::vector<LayerSpec> topology() const {
    std::vector<LayerSpec> out;
    out.reserve(layers.size());
    for (const auto& l : layers) out.push_back(l.spec());
    return out;
  }

  // Throws ShapeError when adjacent layers do not chain, a bias length is off,
  // or the last layer is not linear.
  void validate() const {
    if (layers.empty()) throw ShapeError("MlpModel: no layers");
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const auto& l = layers[k];
      if (l.weight.empty()) throw ShapeError("MlpModel: layer " + std::to_string(k) + " is empty");
      if (l.bias.size() != l.weight.rows())
        throw ShapeError("MlpModel: layer " + std::to_string(k) + " bias length " +
                         std::to_string(l.bias.size()) + " vs weight " + l.weight.shape());
      if (k + 1 < layers.size() && l.weight.rows() != layers[k + 1].weight.cols())
        throw ShapeError("MlpModel: layer " + std::to_string(k) + " output " +
                         std::to_string(l.weight.rows()) + " does not feed layer " +
                         std::to_string(k + 1) + " input " +
                         std::to_string(layers[k + 1].weight.cols()));
    }
    if (layers.back().activation != Activation::identity)
      throw ShapeError("MlpModel: final layer must be linear (identity activation)");
  }

  friend bool operator==(const MlpModel&, const MlpModel&) = default;
};

// Glorot-normal weights, zero biases. `dims` lists every width from input to
// output, so an n-layer net takes n + 1 entries.
inline MlpModel init_mlp(Rng& rng, std::span<const std::size_t> dims, Activation hidden) {
  if (dims.size() < 2) throw std::invalid_argument("init_mlp: need at least input and output dims");
  MlpModel m;
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const std::size_t in = dims[k], out = dims[k + 1];
    if (in == 0 || out == 0) throw std::invalid_argument("init_mlp: zero-width layer");
    const double stddev = std::sqrt(2.0 / static_cast<double>(in + out));
    Rng layer_rng = rng.split(k);
    DenseLayer layer;
    layer.weight = gaussian_fill(layer_rng, out, in, 0.0, stddev);
    layer.bias.assign(out, 0.0);
    layer.activation = (k + 2 == dims.size()) ? Activation::identity : hidden;
    m.layers.push_back(std::move(layer));
  }
  return m;
}

namespace detail {

inline double activate(Activation a, double z) {
  switch (a) {
    case Activation::tanh: return std::tanh(z);
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::identity: return z;
  }
  return z;
}

// Derivative expressed through the pre-activation z and output y = act(z).
inline double activate_grad(Activation a, double z, double y) {
  switch (a) {
    case Activation::tanh: return 1.0 - y * y;
    case Activation::relu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

inline Matrix affine(const Matrix& x, const DenseLayer& layer) {
  if (x.cols() != layer.weight.cols())
    throw ShapeError("forward: batch has " + std::to_string(x.cols()) +
                     " features, layer expects " + std::to_string(layer.weight.cols()));
  Matrix z = matmul_nt(x, layer.weight);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto r = z.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += layer.bias[j];
  }
  return z;
}

}  // namespace detail

// Cached intermediates of one forward pass, consumed by backprop.
struct ForwardTrace {
  Matrix input;
  std::vector<Matrix> pre_activations;
  std::vector<Matrix> activations;
};

struct ForwardResult {
  Matrix logits;
  ForwardTrace trace;
};

inline ForwardResult forward(const MlpModel& model, const Matrix& batch) {
  ForwardResult res;
  res.trace.input = batch;
  const Matrix* x = &res.trace.input;
  for (const auto& layer : model.layers) {
    Matrix z = detail::affine(*x, layer);
    Matrix y = z;
    if (layer.activation != Activation::identity)
      for (double& v : y.data()) v = detail::activate(layer.activation, v);
    res.trace.pre_activations.push_back(std::move(z));
    res.trace.activations.push_back(std::move(y));
    x = &res.trace.activations.back();
  }
  res.logits = res.trace.activations.empty() ? batch : res.trace.activations.back();
  return res;
}

// Forward pass without keeping the trace.
inline Matrix predict_logits(const MlpModel& model, const Matrix& batch) {
  Matrix x = batch;
  for (const auto& layer : model.layers) {
    Matrix z = detail::affine(x, layer);
    if (layer.activation != Activation::identity)
      for (double& v : z.data()) v = detail::activate(layer.activation, v);
    x = std::move(z);
  }
  return x;
}

// Row-wise softmax with max subtraction.
inline Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto z = logits.row(i);
    auto out = p.row(i);
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double s = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      out[j] = std::exp(z[j] - mx);
      s += out[j];
    }
    for (double& v : out) v /= s;
  }
  return p;
}

struct LossResult {
  double loss = 0.0;
  Matrix d_logits;
};

// Mean negative log-likelihood of the true class and its gradient with
// respect to the logits, (softmax - onehot) / batch.
inline LossResult softmax_cross_entropy(const Matrix& logits, std::span<const std::size_t> labels) {
  if (labels.size() != logits.rows())
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(logits.rows()) + " rows");
  if (logits.rows() == 0) throw std::invalid_argument("softmax_cross_entropy: empty batch");
  LossResult res;
  res.d_logits = Matrix(logits.rows(), logits.cols());
  const double inv_n = 1.0 / static_cast<double>(logits.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const std::size_t y = labels[i];
    if (y >= logits.cols())
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y) + " at row " +
                              std::to_string(i) + " outside [0, " + std::to_string(logits.cols()) +
                              ")");
    const auto z = logits.row(i);
    double mx = z[0];
    for (double v : z) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    const double log_norm = mx + std::log(s);
    total += log_norm - z[y];
    auto d = res.d_logits.row(i);
    for (std::size_t j = 0; j < z.size(); ++j) d[j] = std::exp(z[j] - log_norm) * inv_n;
    d[y] -= inv_n;
  }
  res.loss = total * inv_n;
  return res;
}

struct LayerGradient {
  Matrix weight;
  std::vector<double> bias;
};

struct Gradients {
  std::vector<LayerGradient> layers;
  Matrix input;
};

inline Gradients backprop(const MlpModel& model, const ForwardTrace& trace, const Matrix& d_logits) {
  const std::size_t L = model.layers.size();
  if (trace.activations.size() != L || trace.pre_activations.size() != L)
    throw ShapeError("backprop: trace has " + std::to_string(trace.activations.size()) +
                     " layers, model has " + std::to_string(L));
  const std::size_t batch = trace.input.rows();
  for (std::size_t k = 0; k < L; ++k) {
    const auto& a = trace.activations[k];
    if (a.rows() != batch || a.cols() != model.layers[k].weight.rows())
      throw ShapeError("backprop: stale trace at layer " + std::to_string(k) + " (" + a.shape() +
                       ")");
  }
  if (trace.input.cols() != model.input_dim())
    throw ShapeError("backprop: trace input " + trace.input.shape() + " does not match model");
  if (d_logits.rows() != batch || d_logits.cols() != model.output_dim())
    throw ShapeError("backprop: d_logits " + d_logits.shape() + " does not match logits " +
                     Matrix::shape_string(batch, model.output_dim()));

  Gradients g;
  g.layers.resize(L);
  Matrix upstream = d_logits;
  for (std::size_t k = L; k-- > 0;) {
    const auto& layer = model.layers[k];
    const Matrix& z = trace.pre_activations[k];
    const Matrix& y = trace.activations[k];
    Matrix dz = std::move(upstream);
    if (layer.activation != Activation::identity) {
      auto d = dz.data();
      const auto zv = z.data();
      const auto yv = y.data();
      for (std::size_t i = 0; i < d.size(); ++i)
        d[i] *= detail::activate_grad(layer.activation, zv[i], yv[i]);
    }
    const Matrix& x = k == 0 ? trace.input : trace.activations[k - 1];
    g.layers[k].weight = matmul_tn(dz, x);
    g.layers[k].bias.assign(dz.cols(), 0.0);
    for (std::size_t i = 0; i < dz.rows(); ++i) {
      const auto r = dz.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) g.layers[k].bias[j] += r[j];
    }
    upstream = matmul(dz, layer.weight);
  }
  g.input = std::move(upstream);
  return g;
}

}  // namespace bella
