#pragma once

// Low-rank perturbations W = W0 + B A of frozen dense layers.
//
// A particle carries one LayerAdapter per base layer. A layer is either
// frozen (std::monostate), low-rank (B: out x r, A: r x in), or a dense
// delta of the full layer shape. The dense kind exists so full-parameter
// SVGD runs through exactly the same code as the low-rank one.

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "bella/linalg.hpp"
#include "bella/nn.hpp"
#include "bella/rng.hpp"

namespace bella {

struct LowRankAdapter {
  Matrix b;  // d1 x r
  Matrix a;  // r x d2

  std::size_t rank() const { return b.cols(); }
  std::size_t out_dim() const { return b.rows(); }
  std::size_t in_dim() const { return a.cols(); }

  void validate() const {
    if (b.cols() != a.rows())
      throw ShapeError("LowRankAdapter: B " + b.shape() + " and A " + a.shape() +
                       " disagree on rank");
    if (rank() == 0) throw ShapeError("LowRankAdapter: rank must be at least 1");
  }

  friend bool operator==(const LowRankAdapter&, const LowRankAdapter&) = default;
};

struct DenseDelta {
  Matrix delta;  // d1 x d2

  friend bool operator==(const DenseDelta&, const DenseDelta&) = default;
};

using LayerAdapter = std::variant<std::monostate, LowRankAdapter, DenseDelta>;
using AdapterStack = std::vector<LayerAdapter>;

enum class AdapterKind { low_rank, dense };

inline Matrix effective_weight(const Matrix& base_w, const LowRankAdapter& adapter) {
  adapter.validate();
  if (adapter.out_dim() != base_w.rows() || adapter.in_dim() != base_w.cols())
    throw ShapeError("effective_weight: base " + base_w.shape() + " vs adapter " +
                     Matrix::shape_string(adapter.out_dim(), adapter.in_dim()));
  Matrix w = matmul(adapter.b, adapter.a);
  axpy(w, base_w, 1.0);
  return w;
}

inline Matrix effective_weight(const Matrix& base_w, const LayerAdapter& adapter) {
  if (const auto* lr = std::get_if<LowRankAdapter>(&adapter)) return effective_weight(base_w, *lr);
  if (const auto* d = std::get_if<DenseDelta>(&adapter)) {
    if (!d->delta.same_shape(base_w))
      throw ShapeError("effective_weight: base " + base_w.shape() + " vs dense delta " +
                       d->delta.shape());
    return add_scaled(base_w, d->delta, 1.0);
  }
  return base_w;
}

// Chain rule through W = W0 + B A: dB = dW A^T, dA = B^T dW.
struct RoutedGradient {
  Matrix b;
  Matrix a;
};

inline RoutedGradient route_gradient(const Matrix& d_weight, const LowRankAdapter& adapter) {
  adapter.validate();
  if (d_weight.rows() != adapter.out_dim() || d_weight.cols() != adapter.in_dim())
    throw ShapeError("route_gradient: dW " + d_weight.shape() + " vs adapter " +
                     Matrix::shape_string(adapter.out_dim(), adapter.in_dim()));
  return {matmul_nt(d_weight, adapter.a), matmul_tn(adapter.b, d_weight)};
}

// Routes a dense weight gradient onto whatever parameters the layer carries;
// the result has the same variant alternative as `adapter`.
inline LayerAdapter route_gradient(const Matrix& d_weight, const LayerAdapter& adapter) {
  if (const auto* lr = std::get_if<LowRankAdapter>(&adapter)) {
    auto g = route_gradient(d_weight, *lr);
    return LowRankAdapter{std::move(g.b), std::move(g.a)};
  }
  if (const auto* d = std::get_if<DenseDelta>(&adapter)) {
    detail::require_same_shape(d_weight, d->delta, "route_gradient");
    return DenseDelta{d_weight};
  }
  return std::monostate{};
}

struct ParamCount {
  std::size_t bella = 0;
  std::size_t full = 0;

  double ratio() const { return full == 0 ? 0.0 : static_cast<double>(bella) / full; }
  friend bool operator==(const ParamCount&, const ParamCount&) = default;
};

// Trainable parameters of n rank-r adapters on one d1 x d2 layer versus n
// dense copies. An adapter may exceed its layer (r(d1+d2) > d1 d2); that is
// reported as-is.
inline ParamCount param_count(std::size_t d1, std::size_t d2, std::size_t rank,
                              std::size_t n_particles) {
  if (d1 == 0 || d2 == 0 || rank == 0 || n_particles == 0)
    throw std::invalid_argument("param_count: dimensions, rank and particle count must be positive");
  return {n_particles * rank * (d1 + d2), n_particles * d1 * d2};
}

// Layers a particle adapts. Entry k is true when base layer k is trainable.
using LayerMask = std::vector<bool>;

inline ParamCount param_count(std::span<const LayerSpec> topology, const LayerMask& mask,
                              std::size_t rank, std::size_t n_particles) {
  if (mask.size() != topology.size())
    throw ShapeError("param_count: mask has " + std::to_string(mask.size()) + " entries for " +
                     std::to_string(topology.size()) + " layers");
  ParamCount total;
  for (std::size_t k = 0; k < topology.size(); ++k) {
    if (!mask[k]) continue;
    const auto c = param_count(topology[k].out_dim, topology[k].in_dim, rank, n_particles);
    total.bella += c.bella;
    total.full += c.full;
  }
  return total;
}

// Mask grammar: "auto" adapts every layer where a rank-r factorization is
// both admissible (r <= min(d1, d2)) and smaller than the layer
// (r(d1 + d2) < d1 d2); "all" adapts every layer; otherwise a comma separated
// list of layer indices. Dense deltas ignore the rank bound on listed layers.
inline LayerMask resolve_layer_mask(std::string_view spec, std::span<const LayerSpec> topology,
                                    std::size_t rank, bool low_rank = true) {
  LayerMask mask(topology.size(), false);
  if (spec == "auto") {
    for (std::size_t k = 0; k < topology.size(); ++k) {
      const std::size_t d1 = topology[k].out_dim, d2 = topology[k].in_dim;
      mask[k] = rank <= std::min(d1, d2) && rank * (d1 + d2) < d1 * d2;
    }
  } else if (spec == "all") {
    mask.assign(topology.size(), true);
  } else {
    std::stringstream ss{std::string(spec)};
    std::string item;
    while (std::getline(ss, item, ',')) {
      std::size_t pos = 0;
      unsigned long k = 0;
      try {
        k = std::stoul(item, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos == 0 || pos != item.size())
        throw std::invalid_argument("layer mask: '" + item + "' is not a layer index");
      if (k >= topology.size())
        throw ShapeError("layer mask: layer " + item + " does not exist (model has " +
                         std::to_string(topology.size()) + " layers)");
      mask[k] = true;
    }
  }
  bool any = false;
  for (std::size_t k = 0; k < topology.size(); ++k) {
    if (!mask[k]) continue;
    any = true;
    const std::size_t d1 = topology[k].out_dim, d2 = topology[k].in_dim;
    if (low_rank && rank > std::min(d1, d2))
      throw ShapeError("layer mask: rank " + std::to_string(rank) + " exceeds min(" +
                       std::to_string(d1) + ", " + std::to_string(d2) + ") of layer " +
                       std::to_string(k));
  }
  if (!any) throw ShapeError("layer mask '" + std::string(spec) + "' selects no layers");
  return mask;
}

// A and B i.i.d. N(0, (scale / sqrt(r))^2). B is drawn from rng.split(0) and
// A from rng.split(1).
inline LowRankAdapter init_adapter(const Rng& rng, std::size_t d1, std::size_t d2, std::size_t rank,
                                   double scale) {
  if (!(scale > 0.0)) throw std::invalid_argument("init_adapter: scale must be positive");
  if (rank == 0) throw std::invalid_argument("init_adapter: rank must be at least 1");
  const double stddev = scale / std::sqrt(static_cast<double>(rank));
  Rng rb = rng.split(0);
  Rng ra = rng.split(1);
  return {gaussian_fill(rb, d1, rank, 0.0, stddev), gaussian_fill(ra, rank, d2, 0.0, stddev)};
}

// Dense deltas start with the entry variance of a rank-r product from
// init_adapter: scale^4 / r.
inline DenseDelta init_dense_delta(const Rng& rng, std::size_t d1, std::size_t d2,
                                   std::size_t rank, double scale) {
  if (!(scale > 0.0)) throw std::invalid_argument("init_dense_delta: scale must be positive");
  Rng rd = rng.split(2);
  return {gaussian_fill(rd, d1, d2, 0.0, scale * scale / std::sqrt(static_cast<double>(rank)))};
}

// Fresh adapters for every masked layer of `topology`; layer k draws from
// rng.split(k).
inline AdapterStack init_adapter_stack(const Rng& rng, std::span<const LayerSpec> topology,
                                       const LayerMask& mask, AdapterKind kind, std::size_t rank,
                                       double scale) {
  if (mask.size() != topology.size())
    throw ShapeError("init_adapter_stack: mask/topology length mismatch");
  AdapterStack stack(topology.size());
  for (std::size_t k = 0; k < topology.size(); ++k) {
    if (!mask[k]) continue;
    const Rng layer_rng = rng.split(k);
    const std::size_t d1 = topology[k].out_dim, d2 = topology[k].in_dim;
    if (kind == AdapterKind::low_rank)
      stack[k] = init_adapter(layer_rng, d1, d2, rank, scale);
    else
      stack[k] = init_dense_delta(layer_rng, d1, d2, rank, scale);
  }
  return stack;
}

// Trainable tensors of a stack in canonical order: per layer, B then A for
// low-rank layers and the delta for dense ones.
inline std::vector<Matrix*> parameters(AdapterStack& stack) {
  std::vector<Matrix*> out;
  for (auto& layer : stack) {
    if (auto* lr = std::get_if<LowRankAdapter>(&layer)) {
      out.push_back(&lr->b);
      out.push_back(&lr->a);
    } else if (auto* d = std::get_if<DenseDelta>(&layer)) {
      out.push_back(&d->delta);
    }
  }
  return out;
}

inline std::vector<const Matrix*> parameters(const AdapterStack& stack) {
  std::vector<const Matrix*> out;
  for (const auto& layer : stack) {
    if (const auto* lr = std::get_if<LowRankAdapter>(&layer)) {
      out.push_back(&lr->b);
      out.push_back(&lr->a);
    } else if (const auto* d = std::get_if<DenseDelta>(&layer)) {
      out.push_back(&d->delta);
    }
  }
  return out;
}

// Names matching parameters(): "layer<k>.B", "layer<k>.A", "layer<k>.D".
inline std::vector<std::string> parameter_names(const AdapterStack& stack) {
  std::vector<std::string> out;
  for (std::size_t k = 0; k < stack.size(); ++k) {
    const std::string p = "layer" + std::to_string(k);
    if (std::holds_alternative<LowRankAdapter>(stack[k])) {
      out.push_back(p + ".B");
      out.push_back(p + ".A");
    } else if (std::holds_alternative<DenseDelta>(stack[k])) {
      out.push_back(p + ".D");
    }
  }
  return out;
}

inline std::size_t trainable_parameter_count(const AdapterStack& stack) {
  std::size_t n = 0;
  for (const Matrix* p : parameters(stack)) n += p->size();
  return n;
}

inline AdapterStack zeros_like(const AdapterStack& stack) {
  AdapterStack out = stack;
  for (Matrix* p : parameters(out))
    for (double& v : p->data()) v = 0.0;
  return out;
}

inline void axpy(AdapterStack& y, const AdapterStack& x, double alpha) {
  auto py = parameters(y);
  const auto px = parameters(x);
  if (py.size() != px.size()) throw ShapeError("axpy: adapter stacks differ in structure");
  for (std::size_t k = 0; k < py.size(); ++k) axpy(*py[k], *px[k], alpha);
}

// Structural equality: same length, same kind per layer, same tensor shapes.
inline bool same_structure(const AdapterStack& x, const AdapterStack& y) {
  if (x.size() != y.size()) return false;
  for (std::size_t k = 0; k < x.size(); ++k) {
    if (x[k].index() != y[k].index()) return false;
    if (const auto* a = std::get_if<LowRankAdapter>(&x[k])) {
      const auto& b = std::get<LowRankAdapter>(y[k]);
      if (!a->a.same_shape(b.a) || !a->b.same_shape(b.b)) return false;
    } else if (const auto* a = std::get_if<DenseDelta>(&x[k])) {
      if (!a->delta.same_shape(std::get<DenseDelta>(y[k]).delta)) return false;
    }
  }
  return true;
}

// Frozen base plus one adapter slot per layer.
struct AdaptedModel {
  std::shared_ptr<const MlpModel> base;
  AdapterStack adapters;

  void validate() const {
    if (!base) throw std::invalid_argument("AdaptedModel: no base model");
    if (adapters.size() != base->layers.size())
      throw ShapeError("AdaptedModel: " + std::to_string(adapters.size()) + " adapter slots for " +
                       std::to_string(base->layers.size()) + " layers");
  }

  // The network with effective weights W0 + delta; biases are the base's.
  MlpModel materialize() const {
    validate();
    MlpModel m = *base;
    for (std::size_t k = 0; k < adapters.size(); ++k)
      if (!std::holds_alternative<std::monostate>(adapters[k]))
        m.layers[k].weight = effective_weight(base->layers[k].weight, adapters[k]);
    return m;
  }
};

// Dense delta of one layer slot, zero for frozen layers.
inline Matrix layer_delta(const LayerAdapter& adapter, std::size_t d1, std::size_t d2) {
  if (const auto* lr = std::get_if<LowRankAdapter>(&adapter)) return matmul(lr->b, lr->a);
  if (const auto* d = std::get_if<DenseDelta>(&adapter)) return d->delta;
  return Matrix(d1, d2);
}

// Mean over particles of the materialized per-layer deltas (products B_i A_i,
// not factors). Returns one d1 x d2 matrix per base layer.
inline std::vector<Matrix> soup_average(std::span<const AdapterStack> particles,
                                        std::span<const LayerSpec> topology) {
  if (particles.empty()) throw std::invalid_argument("soup_average: no particles");
  for (const auto& p : particles) {
    if (p.size() != topology.size())
      throw ShapeError("soup_average: particle has " + std::to_string(p.size()) +
                       " layers, topology has " + std::to_string(topology.size()));
    if (!same_structure(p, particles.front()))
      throw ShapeError("soup_average: particles differ in adapter structure");
  }
  // mean = x_0 + (1/n) sum_i (x_i - x_0), which is exact for identical
  // particles and for a pair of opposite deltas.
  std::vector<Matrix> out;
  const double inv_n = 1.0 / static_cast<double>(particles.size());
  for (std::size_t k = 0; k < topology.size(); ++k) {
    const std::size_t d1 = topology[k].out_dim, d2 = topology[k].in_dim;
    Matrix first = layer_delta(particles.front()[k], d1, d2);
    if (first.rows() != d1 || first.cols() != d2)
      throw ShapeError("soup_average: layer " + std::to_string(k) + " delta " + first.shape() +
                       " vs layer " + Matrix::shape_string(d1, d2));
    Matrix offset(d1, d2);
    for (std::size_t i = 1; i < particles.size(); ++i) {
      const Matrix d = layer_delta(particles[i][k], d1, d2);
      axpy(offset, d, 1.0);
      axpy(offset, first, -1.0);
    }
    axpy(first, offset, inv_n);
    out.push_back(std::move(first));
  }
  return out;
}

// Base model with the soup deltas folded into its weights.
inline MlpModel merge_soup(const MlpModel& base, std::span<const Matrix> deltas) {
  if (deltas.size() != base.layers.size())
    throw ShapeError("merge_soup: " + std::to_string(deltas.size()) + " deltas for " +
                     std::to_string(base.layers.size()) + " layers");
  MlpModel m = base;
  for (std::size_t k = 0; k < deltas.size(); ++k) axpy(m.layers[k].weight, deltas[k], 1.0);
  return m;
}

}  // namespace bella
