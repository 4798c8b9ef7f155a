#pragma once

// One-step L-infinity FGSM against single models and particle sets.

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bella/linalg.hpp"
#include "bella/nn.hpp"
#include "bella/parallel.hpp"
#include "bella/predict.hpp"
#include "bella/svgd.hpp"

namespace bella {

struct AttackConfig {
  std::vector<double> budgets{0.001, 0.005, 0.01, 0.03};
  double lower = -10.0;  // per-feature input bounds, shared by all features
  double upper = 10.0;
  AggregationRule rule = AggregationRule::logit_mean;

  void validate() const {
    if (!(lower < upper)) throw std::invalid_argument("attack bounds need lower < upper");
    for (std::size_t i = 0; i < budgets.size(); ++i) {
      if (!(budgets[i] >= 0.0)) throw std::invalid_argument("attack budgets must be non-negative");
      if (i > 0 && budgets[i] < budgets[i - 1])
        throw std::invalid_argument("attack budgets must be sorted ascending");
    }
  }
};

// Gradient of the mean cross-entropy of the aggregated prediction with
// respect to the input batch. logit_mean differentiates CE(mean_i z_i);
// prob_mean differentiates -log mean_i softmax(z_i)[y].
inline Matrix input_gradient(const ParticleSet& set, const Matrix& batch,
                             std::span<const std::size_t> labels, AggregationRule rule,
                             std::size_t workers = 1) {
  const std::size_t n = set.size();
  if (n == 0) throw std::invalid_argument("input_gradient: empty particle set");
  std::vector<MlpModel> models(n);
  std::vector<ForwardResult> fr(n);
  parallel_for(n, workers, [&](std::size_t i) {
    models[i] = set.materialize(i);
    fr[i] = forward(models[i], batch);
  });
  std::vector<Matrix> d_logits(n);
  const double inv_n = 1.0 / static_cast<double>(n);
  if (rule == AggregationRule::logit_mean) {
    Matrix mean(batch.rows(), set.base->output_dim());
    for (const auto& f : fr) axpy(mean, f.logits, inv_n);
    const auto loss = softmax_cross_entropy(mean, labels);
    for (std::size_t i = 0; i < n; ++i) d_logits[i] = scale(loss.d_logits, inv_n);
  } else {
    std::vector<Matrix> probs;
    for (const auto& f : fr) probs.push_back(softmax(f.logits));
    const std::size_t B = batch.rows();
    if (labels.size() != B) throw ShapeError("input_gradient: label count mismatch");
    std::vector<double> pbar(B, 0.0);
    for (std::size_t s = 0; s < B; ++s) {
      if (labels[s] >= set.base->output_dim()) throw std::out_of_range("input_gradient: label");
      for (std::size_t i = 0; i < n; ++i) pbar[s] += probs[i](s, labels[s]) * inv_n;
    }
    for (std::size_t i = 0; i < n; ++i) {
      Matrix d(B, probs[i].cols());
      for (std::size_t s = 0; s < B; ++s) {
        const std::size_t y = labels[s];
        const double c = -probs[i](s, y) * inv_n / (static_cast<double>(B) * pbar[s]);
        for (std::size_t k = 0; k < d.cols(); ++k)
          d(s, k) = c * ((k == y ? 1.0 : 0.0) - probs[i](s, k));
      }
      d_logits[i] = std::move(d);
    }
  }
  std::vector<Matrix> grads(n);
  parallel_for(n, workers, [&](std::size_t i) {
    grads[i] = backprop(models[i], fr[i].trace, d_logits[i]).input;
  });
  Matrix total(batch.rows(), batch.cols());
  for (const auto& g : grads) axpy(total, g, 1.0);
  return total;
}

// x' = clip(x + eps * sign(grad), lower, upper) with sign(0) = 0. Coordinates
// whose rounded step would exceed eps are pulled back by one ulp, so
// |x' - x| <= eps holds in floating point.
inline Matrix fgsm_step(const Matrix& batch, const Matrix& grad, double epsilon, double lower,
                        double upper) {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("fgsm: epsilon must be non-negative");
  detail::require_same_shape(batch, grad, "fgsm_step");
  Matrix out = batch;
  if (epsilon == 0.0) return out;
  auto o = out.data();
  const auto x = batch.data();
  const auto g = grad.data();
  for (std::size_t e = 0; e < o.size(); ++e) {
    if (x[e] < lower || x[e] > upper)
      throw std::invalid_argument("fgsm: input entry " + std::to_string(x[e]) +
                                  " lies outside the attack bounds");
    const double s = g[e] > 0.0 ? 1.0 : (g[e] < 0.0 ? -1.0 : 0.0);
    if (s == 0.0) continue;
    double v = std::min(std::max(x[e] + epsilon * s, lower), upper);
    while (std::abs(v - x[e]) > epsilon) v = std::nextafter(v, x[e]);
    o[e] = v;
  }
  return out;
}

inline Matrix fgsm(const ParticleSet& set, const Matrix& batch, std::span<const std::size_t> labels,
                   double epsilon, const AttackConfig& cfg, std::size_t workers = 1) {
  if (!(epsilon >= 0.0)) throw std::invalid_argument("fgsm: epsilon must be non-negative");
  if (epsilon == 0.0) return batch;
  const Matrix grad = input_gradient(set, batch, labels, cfg.rule, workers);
  return fgsm_step(batch, grad, epsilon, cfg.lower, cfg.upper);
}

struct RobustnessPoint {
  double epsilon = 0.0;
  double accuracy = 0.0;
};

// Clean accuracy at epsilon = 0 followed by one row per budget.
inline std::vector<RobustnessPoint> robust_accuracy_sweep(const ParticleSet& set,
                                                          const Dataset& test,
                                                          const AttackConfig& cfg,
                                                          std::size_t workers = 1) {
  cfg.validate();
  if (test.size() == 0) throw std::invalid_argument("robust_accuracy_sweep: empty test set");
  auto accuracy_on = [&](const Matrix& x) {
    const auto pred = classify(posterior_predictive(set, x, workers), cfg.rule);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == test.labels[i] ? 1 : 0;
    return static_cast<double>(ok) / static_cast<double>(test.size());
  };
  std::vector<RobustnessPoint> out;
  out.push_back({0.0, accuracy_on(test.features)});
  const Matrix grad = input_gradient(set, test.features, test.labels, cfg.rule, workers);
  for (double eps : cfg.budgets) {
    if (eps == 0.0) {
      out.push_back({0.0, out.front().accuracy});
      continue;
    }
    out.push_back({eps, accuracy_on(fgsm_step(test.features, grad, eps, cfg.lower, cfg.upper))});
  }
  return out;
}

}  // namespace bella
