#pragma once

// Particle transport over low-rank adapters.
//
// Each step computes, for every particle i, the ascent direction
//   phi_i = (1/n) sum_j [ k_ij grad log p(theta_j | D) - gamma grad_i k_ij ]
// where grad_i k_ij is the kernel gradient with respect to particle i's own
// factors (see kernel_grads), then moves every particle simultaneously with
// its own Adam state. Kernel and bandwidth come from the pre-update snapshot.
// `ensemble` mode replaces phi_i by particle i's own posterior gradient.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bella/data.hpp"
#include "bella/kernel.hpp"
#include "bella/linalg.hpp"
#include "bella/lowrank.hpp"
#include "bella/nn.hpp"
#include "bella/optim.hpp"
#include "bella/parallel.hpp"
#include "bella/rng.hpp"

namespace bella {

enum class TrainMode { svgd, ensemble, single };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::svgd: return "svgd";
    case TrainMode::ensemble: return "ensemble";
    case TrainMode::single: return "single";
  }
  return "?";
}

inline TrainMode parse_train_mode(std::string_view s) {
  if (s == "svgd") return TrainMode::svgd;
  if (s == "ensemble") return TrainMode::ensemble;
  if (s == "single") return TrainMode::single;
  throw std::invalid_argument("unknown mode '" + std::string(s) +
                              "' (expected svgd, ensemble or single)");
}

inline std::string to_string(AdapterKind k) { return k == AdapterKind::dense ? "dense" : "low_rank"; }

inline AdapterKind parse_adapter_kind(std::string_view s) {
  if (s == "low_rank") return AdapterKind::low_rank;
  if (s == "dense") return AdapterKind::dense;
  throw std::invalid_argument("unknown adapter kind '" + std::string(s) +
                              "' (expected low_rank or dense)");
}

struct TrainConfig {
  TrainMode mode = TrainMode::svgd;
  std::size_t n_particles = 5;
  std::size_t rank = 4;
  double gamma = 0.01;
  double learning_rate = 5e-3;
  double prior_variance = 1.0;
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  KernelConfig kernel;
  std::string layers = "auto";
  AdapterKind adapter = AdapterKind::low_rank;
  double init_scale = 2.0;
  Schedule schedule = Schedule::cosine;

  void validate() const {
    if (n_particles < 1) throw std::invalid_argument("train.n_particles must be at least 1");
    if (mode == TrainMode::single && n_particles != 1)
      throw std::invalid_argument("train.n_particles must be 1 in single mode");
    if (mode != TrainMode::svgd && gamma != 0.0)
      throw std::invalid_argument("train.gamma must be 0 outside svgd mode");
    if (!(gamma >= 0.0)) throw std::invalid_argument("train.gamma must be non-negative");
    if (rank < 1) throw std::invalid_argument("train.rank must be at least 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train.learning_rate must be positive");
    if (!(prior_variance > 0.0)) throw std::invalid_argument("train.prior_variance must be positive");
    if (epochs < 1) throw std::invalid_argument("train.epochs must be at least 1");
    if (batch_size < 1) throw std::invalid_argument("train.batch_size must be at least 1");
    if (!(init_scale > 0.0)) throw std::invalid_argument("train.init_scale must be positive");
    kernel.validate();
  }

  AdamConfig adam() const {
    AdamConfig a;
    a.learning_rate = learning_rate;
    a.schedule = schedule;
    return a;
  }
};

struct Particle {
  AdapterStack adapters;
  AdamState optimizer;
};

struct ParticleSet {
  std::shared_ptr<const MlpModel> base;
  std::vector<Particle> particles;
  LayerMask mask;

  std::size_t size() const { return particles.size(); }

  std::vector<AdapterStack> snapshot() const {
    std::vector<AdapterStack> out;
    out.reserve(particles.size());
    for (const auto& p : particles) out.push_back(p.adapters);
    return out;
  }

  MlpModel materialize(std::size_t i) const {
    return AdaptedModel{base, particles.at(i).adapters}.materialize();
  }
};

// n particles over `base`; particle i draws its adapters from
// Rng(seed).split("adapters").split(i).
inline ParticleSet make_particle_set(std::shared_ptr<const MlpModel> base, const TrainConfig& cfg) {
  cfg.validate();
  if (!base) throw std::invalid_argument("make_particle_set: no base model");
  base->validate();
  ParticleSet set;
  set.base = std::move(base);
  const auto topo = set.base->topology();
  set.mask = resolve_layer_mask(cfg.layers, topo, cfg.rank, cfg.adapter == AdapterKind::low_rank);
  const Rng root = Rng(cfg.seed).split("adapters");
  for (std::size_t i = 0; i < cfg.n_particles; ++i) {
    Particle p;
    p.adapters =
        init_adapter_stack(root.split(i), topo, set.mask, cfg.adapter, cfg.rank, cfg.init_scale);
    const AdapterStack& cref = p.adapters;
    const auto params = parameters(cref);
    p.optimizer = make_adam_state(params);
    set.particles.push_back(std::move(p));
  }
  return set;
}

// Likelihood scaling and prior for the log posterior. The minibatch term is
// -dataset_size * mean cross-entropy, i.e. the batch log-likelihood rescaled
// by dataset_size / batch_size. dataset_size = 0 leaves the prior alone.
struct PosteriorSpec {
  double dataset_size = 1.0;
  double prior_variance = 1.0;
};

struct PosteriorGrad {
  AdapterStack grad;
  double loss = 0.0;  // mean cross-entropy on the batch
  std::size_t correct = 0;
};

// Gradient of
//   -dataset_size * CE(batch) - sum over adapter tensors |P|^2 / (2 prior_variance)
// with respect to every adapter parameter.
inline PosteriorGrad log_posterior_grad(const std::shared_ptr<const MlpModel>& base,
                                        const AdapterStack& adapters, const Matrix& batch,
                                        std::span<const std::size_t> labels,
                                        const PosteriorSpec& spec) {
  if (!(spec.prior_variance > 0.0))
    throw std::invalid_argument("log_posterior_grad: prior variance must be positive");
  PosteriorGrad out;
  out.grad = zeros_like(adapters);
  if (spec.dataset_size != 0.0) {
    const AdaptedModel am{base, adapters};
    const MlpModel model = am.materialize();
    auto fr = forward(model, batch);
    auto loss = softmax_cross_entropy(fr.logits, labels);
    out.loss = loss.loss;
    const auto pred = argmax_rows(fr.logits);
    for (std::size_t r = 0; r < pred.size(); ++r) out.correct += pred[r] == labels[r] ? 1 : 0;
    for (double& v : loss.d_logits.data()) v *= -spec.dataset_size;
    const auto g = backprop(model, fr.trace, loss.d_logits);
    for (std::size_t k = 0; k < adapters.size(); ++k)
      if (!std::holds_alternative<std::monostate>(adapters[k]))
        out.grad[k] = route_gradient(g.layers[k].weight, adapters[k]);
  }
  auto gp = parameters(out.grad);
  const auto pp = parameters(adapters);
  for (std::size_t t = 0; t < gp.size(); ++t) {
    auto g = gp[t]->data();
    const auto p = pp[t]->data();
    for (std::size_t e = 0; e < g.size(); ++e) g[e] -= p[e] / spec.prior_variance;
  }
  return out;
}

// phi_i = (1/n) sum_j [ K(i,j) grads[j] - gamma kernel_grads(i, j) ]
inline std::vector<AdapterStack> svgd_direction(std::span<const AdapterStack> particles,
                                                std::span<const AdapterStack> posterior_grads,
                                                const Matrix& kernel, double sigma_sq,
                                                double gamma) {
  const std::size_t n = particles.size();
  if (posterior_grads.size() != n || kernel.rows() != n || kernel.cols() != n)
    throw ShapeError("svgd_direction: " + std::to_string(n) + " particles, " +
                     std::to_string(posterior_grads.size()) + " gradients, kernel " +
                     kernel.shape());
  for (std::size_t i = 0; i < n; ++i)
    if (!same_structure(particles[i], posterior_grads[i]))
      throw ShapeError("svgd_direction: gradient " + std::to_string(i) +
                       " does not match its particle");
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<AdapterStack> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    AdapterStack dir = zeros_like(particles[i]);
    for (std::size_t j = 0; j < n; ++j) {
      axpy(dir, posterior_grads[j], kernel(i, j));
      if (gamma != 0.0 && j != i)
        axpy(dir, kernel_grads(i, j, particles, kernel(i, j), sigma_sq), -gamma);
    }
    for (Matrix* p : parameters(dir))
      for (double& v : p->data()) v *= inv_n;
    out.push_back(std::move(dir));
  }
  return out;
}

inline void apply_update(Particle& particle, const AdapterStack& direction, const AdamConfig& cfg,
                         double lr_factor = 1.0) {
  if (!same_structure(particle.adapters, direction))
    throw ShapeError("apply_update: direction does not match particle");
  const auto params = parameters(particle.adapters);
  const auto dirs = parameters(direction);
  adam_ascent(params, dirs, particle.optimizer, cfg, lr_factor);
}

struct EpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;      // mean over particles and minibatches of cross-entropy
  double accuracy = 0.0;  // mean over particles of minibatch accuracy
  double mean_pairwise_distance = 0.0;  // mean Frobenius distance between particles' deltas
  double bandwidth = 0.0;               // sigma^2 of the last step (svgd), 0 otherwise

  std::string to_line() const {
    std::ostringstream os;
    os.precision(10);
    os << "epoch=" << epoch << " loss=" << loss << " accuracy=" << accuracy
       << " mean_pairwise_distance=" << mean_pairwise_distance << " bandwidth=" << bandwidth;
    return os.str();
  }
};

inline double mean_pairwise_distance(const PairwiseDistances& d) {
  const std::size_t n = d.rows();
  if (n < 2) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) s += std::sqrt(d(i, j));
  return s / static_cast<double>(n * (n - 1) / 2);
}

struct TrainOptions {
  std::size_t workers = 1;
  std::function<void(const EpochLog&)> on_epoch;
};

namespace detail {

inline void require_finite(const ParticleSet& set) {
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto params = parameters(set.particles[i].adapters);
    const auto names = parameter_names(set.particles[i].adapters);
    for (std::size_t t = 0; t < params.size(); ++t)
      if (!all_finite(*params[t]))
        throw NumericError("non-finite value in particle " + std::to_string(i) + " tensor " +
                           names[t]);
  }
}

}  // namespace detail

// Minibatch training. Epoch e shuffles with Rng(seed).split("minibatch").split(e).
inline std::vector<EpochLog> train(ParticleSet& set, const Dataset& data, const TrainConfig& cfg,
                                   const TrainOptions& opts = {}) {
  cfg.validate();
  data.validate();
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (set.size() != cfg.n_particles)
    throw std::invalid_argument("train: particle set has " + std::to_string(set.size()) +
                                " particles, config asks for " + std::to_string(cfg.n_particles));
  if (data.dim() != set.base->input_dim())
    throw ShapeError("train: data has " + std::to_string(data.dim()) + " features, model expects " +
                     std::to_string(set.base->input_dim()));
  if (data.num_classes != set.base->output_dim())
    throw ShapeError("train: data has " + std::to_string(data.num_classes) +
                     " classes, model outputs " + std::to_string(set.base->output_dim()));

  const std::size_t n = set.size();
  const std::size_t N = data.size();
  const std::size_t bs = std::min(cfg.batch_size, N);
  const std::size_t steps_per_epoch = (N + bs - 1) / bs;
  const std::uint64_t total_steps = cfg.epochs * steps_per_epoch;
  const AdamConfig adam = cfg.adam();
  const PosteriorSpec spec{static_cast<double>(N), cfg.prior_variance};
  const Rng shuffle_root = Rng(cfg.seed).split("minibatch");

  std::vector<EpochLog> logs;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng er = shuffle_root.split(epoch);
    const auto perm = permutation(er, N);
    EpochLog log;
    log.epoch = epoch + 1;
    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0; start < N; start += bs) {
      const std::size_t len = std::min(bs, N - start);
      const auto idx = std::span(perm).subspan(start, len);
      const Matrix x = gather_rows(data.features, idx);
      std::vector<std::size_t> y(len);
      for (std::size_t r = 0; r < len; ++r) y[r] = data.labels[idx[r]];

      const auto snapshot = set.snapshot();
      std::vector<PosteriorGrad> grads(n);
      parallel_for(n, opts.workers, [&](std::size_t i) {
        grads[i] = log_posterior_grad(set.base, snapshot[i], x, y, spec);
      });
      std::vector<AdapterStack> g(n);
      for (std::size_t i = 0; i < n; ++i) {
        loss_sum += grads[i].loss;
        correct += grads[i].correct;
        g[i] = std::move(grads[i].grad);
      }
      seen += len;

      std::vector<AdapterStack> dirs;
      if (cfg.mode == TrainMode::svgd) {
        const auto d = pairwise_sq_dist(snapshot);
        const double s2 = select_bandwidth(d, cfg.kernel);
        log.bandwidth = s2;
        dirs = svgd_direction(snapshot, g, kernel_matrix(d, s2), s2, cfg.gamma);
      } else {
        dirs = std::move(g);
      }
      const double factor = schedule_factor(adam.schedule, step, total_steps);
      for (std::size_t i = 0; i < n; ++i) apply_update(set.particles[i], dirs[i], adam, factor);
      ++step;
    }
    detail::require_finite(set);
    log.loss = loss_sum / static_cast<double>(steps_per_epoch * n);
    log.accuracy = static_cast<double>(correct) / static_cast<double>(seen * n);
    log.mean_pairwise_distance = mean_pairwise_distance(pairwise_sq_dist(set.snapshot()));
    if (opts.on_epoch) opts.on_epoch(log);
    logs.push_back(log);
  }
  return logs;
}

// --- Plain-vector SVGD --------------------------------------------------------
//
// Particles are rows of an n x dim matrix. Each row is wrapped as a one-layer
// dense adapter so distances, bandwidth, kernel gradients, directions and the
// optimizer are the exact code paths used for networks.

using LogDensityGrad = std::function<std::vector<double>(std::span<const double>)>;

struct AnalyticConfig {
  TrainMode mode = TrainMode::svgd;  // svgd or ensemble (independent ascent)
  std::size_t steps = 2000;
  double gamma = 1.0;
  double learning_rate = 0.05;
  Schedule schedule = Schedule::constant;
  KernelConfig kernel;
};

inline Matrix analytic_svgd(const LogDensityGrad& log_density_grad, const Matrix& initial,
                            const AnalyticConfig& cfg) {
  const std::size_t n = initial.rows(), dim = initial.cols();
  if (n == 0 || dim == 0) throw std::invalid_argument("analytic_svgd: empty particle cloud");
  if (dim > 10) throw std::invalid_argument("analytic_svgd: dimension must be at most 10");
  cfg.kernel.validate();

  std::vector<Particle> particles(n);
  for (std::size_t i = 0; i < n; ++i) {
    Matrix row(1, dim);
    for (std::size_t c = 0; c < dim; ++c) row(0, c) = initial(i, c);
    particles[i].adapters = AdapterStack{DenseDelta{std::move(row)}};
    const AdapterStack& cref = particles[i].adapters;
    const auto params = parameters(cref);
    particles[i].optimizer = make_adam_state(params);
  }
  AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;
  adam.schedule = cfg.schedule;

  std::vector<AdapterStack> snapshot(n), grads(n);
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t i = 0; i < n; ++i) {
      snapshot[i] = particles[i].adapters;
      const auto& x = std::get<DenseDelta>(snapshot[i][0]).delta;
      const auto g = log_density_grad(x.data());
      if (g.size() != dim) throw ShapeError("analytic_svgd: gradient has wrong dimension");
      grads[i] = AdapterStack{DenseDelta{Matrix(1, dim, g)}};
    }
    std::vector<AdapterStack> dirs;
    if (cfg.mode == TrainMode::svgd) {
      const auto d = pairwise_sq_dist(snapshot);
      const double s2 = select_bandwidth(d, cfg.kernel);
      dirs = svgd_direction(snapshot, grads, kernel_matrix(d, s2), s2, cfg.gamma);
    } else {
      dirs = grads;
    }
    const double factor = schedule_factor(adam.schedule, step, cfg.steps);
    for (std::size_t i = 0; i < n; ++i) apply_update(particles[i], dirs[i], adam, factor);
  }

  Matrix out(n, dim);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& x = std::get<DenseDelta>(particles[i].adapters[0]).delta;
    for (std::size_t c = 0; c < dim; ++c) out(i, c) = x(0, c);
  }
  return out;
}

// Initial cloud drawn i.i.d. N(mean, stddev^2) per coordinate.
inline Matrix analytic_svgd(const LogDensityGrad& log_density_grad, std::size_t n,
                            std::span<const double> init_mean, double init_std,
                            std::uint64_t seed, const AnalyticConfig& cfg) {
  Rng rng = Rng(seed).split("analytic_init");
  Matrix init(n, init_mean.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < init_mean.size(); ++c) init(i, c) = rng.normal(init_mean[c], init_std);
  return analytic_svgd(log_density_grad, init, cfg);
}

}  // namespace bella
