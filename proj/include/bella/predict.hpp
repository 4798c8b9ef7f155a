#pragma once

// Posterior-predictive averaging over particles.

#include <algorithm>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bella/linalg.hpp"
#include "bella/nn.hpp"
#include "bella/parallel.hpp"
#include "bella/svgd.hpp"

namespace bella {

enum class AggregationRule { prob_mean, logit_mean };

inline std::string to_string(AggregationRule r) {
  return r == AggregationRule::prob_mean ? "prob_mean" : "logit_mean";
}

inline AggregationRule parse_aggregation_rule(std::string_view s) {
  if (s == "prob_mean") return AggregationRule::prob_mean;
  if (s == "logit_mean") return AggregationRule::logit_mean;
  throw std::invalid_argument("unknown aggregation rule '" + std::string(s) +
                              "' (expected prob_mean or logit_mean)");
}

struct PredictiveDistribution {
  std::vector<Matrix> per_particle_probs;  // n entries of batch x K
  Matrix mean_probs;                       // batch x K
  Matrix mean_logits;                      // batch x K

  std::size_t particles() const { return per_particle_probs.size(); }
  std::size_t samples() const { return mean_probs.rows(); }
  std::size_t classes() const { return mean_probs.cols(); }
};

// Elementwise mean of equally shaped matrices that does not depend on their
// order: each element's values are sorted and averaged as
// v_min + (1/n) sum (v - v_min), which also returns v exactly when all n
// values are equal.
inline Matrix order_invariant_mean(std::span<const Matrix> parts) {
  if (parts.empty()) throw std::invalid_argument("order_invariant_mean: nothing to average");
  for (const auto& p : parts) detail::require_same_shape(p, parts.front(), "order_invariant_mean");
  Matrix out(parts.front().rows(), parts.front().cols());
  const std::size_t n = parts.size();
  std::vector<double> vals(n);
  for (std::size_t e = 0; e < out.size(); ++e) {
    for (std::size_t i = 0; i < n; ++i) vals[i] = parts[i].data()[e];
    std::sort(vals.begin(), vals.end());
    double offset = 0.0;
    for (std::size_t i = 1; i < n; ++i) offset += vals[i] - vals[0];
    out.data()[e] = vals[0] + offset / static_cast<double>(n);
  }
  return out;
}

inline PredictiveDistribution predictive_from_logits(std::span<const Matrix> logits) {
  if (logits.empty()) throw std::invalid_argument("predictive_from_logits: no particles");
  PredictiveDistribution dist;
  for (const auto& z : logits) dist.per_particle_probs.push_back(softmax(z));
  dist.mean_probs = order_invariant_mean(dist.per_particle_probs);
  dist.mean_logits = order_invariant_mean(logits);
  return dist;
}

// (1/n) sum_i softmax(f(x; W0 + delta_i)) plus the averaged logits.
inline PredictiveDistribution posterior_predictive(const ParticleSet& set, const Matrix& batch,
                                                   std::size_t workers = 1) {
  if (set.size() == 0) throw std::invalid_argument("posterior_predictive: empty particle set");
  std::vector<Matrix> logits(set.size());
  parallel_for(set.size(), workers,
               [&](std::size_t i) { logits[i] = predict_logits(set.materialize(i), batch); });
  return predictive_from_logits(logits);
}

// Argmax per row of the mean probabilities or the mean logits; ties go to the
// lowest class index.
inline std::vector<std::size_t> classify(const PredictiveDistribution& dist, AggregationRule rule) {
  return argmax_rows(rule == AggregationRule::prob_mean ? dist.mean_probs : dist.mean_logits);
}

}  // namespace bella
