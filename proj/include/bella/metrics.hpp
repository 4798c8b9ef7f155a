#pragma once

// Uncertainty, diversity and calibration metrics. Entropies are in nats.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "bella/linalg.hpp"
#include "bella/predict.hpp"

namespace bella {

inline double predictive_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return std::max(h, 0.0);
}

namespace detail {

// Mean that is exact when every value is equal.
inline double offset_mean(std::span<const double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double offset = 0.0;
  for (std::size_t i = 1; i < v.size(); ++i) offset += v[i] - v[0];
  return v[0] + offset / static_cast<double>(v.size());
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace detail

// Per-sample I(y; theta) = H[mean_probs] - (1/n) sum_i H[probs_i], clamped at 0.
inline std::vector<double> mutual_information(const PredictiveDistribution& dist) {
  if (dist.particles() == 0) throw std::invalid_argument("mutual_information: no particles");
  std::vector<double> mi(dist.samples());
  std::vector<double> h(dist.particles());
  for (std::size_t s = 0; s < dist.samples(); ++s) {
    for (std::size_t i = 0; i < dist.particles(); ++i)
      h[i] = predictive_entropy(dist.per_particle_probs[i].row(s));
    std::sort(h.begin(), h.end());
    mi[s] = std::max(predictive_entropy(dist.mean_probs.row(s)) - detail::offset_mean(h), 0.0);
  }
  return mi;
}

// Mean over samples and particles of KL(mean_probs || probs_i); particle
// probabilities are floored at 1e-12 inside the log.
inline double diversity(const PredictiveDistribution& dist) {
  if (dist.particles() == 0 || dist.samples() == 0)
    throw std::invalid_argument("diversity: need at least one particle and one sample");
  double total = 0.0;
  std::vector<double> kl(dist.particles());
  for (std::size_t s = 0; s < dist.samples(); ++s) {
    const auto p = dist.mean_probs.row(s);
    for (std::size_t i = 0; i < dist.particles(); ++i) {
      const auto q = dist.per_particle_probs[i].row(s);
      double d = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k)
        if (p[k] > 0.0) d += p[k] * std::log(p[k] / std::max(q[k], 1e-12));
      kl[i] = d;
    }
    std::sort(kl.begin(), kl.end());
    total += std::accumulate(kl.begin(), kl.end(), 0.0);
  }
  return total / static_cast<double>(dist.samples() * dist.particles());
}

struct CalibrationBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
};

struct CalibrationResult {
  double ece = 0.0;
  double mce = 0.0;
  std::vector<CalibrationBin> bins;
};

// Equal-width bins; bin b holds confidences in [b/B, (b+1)/B), with 1.0 in the
// last bin. Per-bin confidence sums run over sorted values so the result does
// not depend on sample order. Empty bins add nothing to ECE and are skipped
// by MCE.
inline CalibrationResult calibration(std::span<const double> confidences,
                                     const std::vector<bool>& correct, std::size_t num_bins = 15) {
  if (confidences.size() != correct.size())
    throw ShapeError("calibration: " + std::to_string(confidences.size()) + " confidences vs " +
                     std::to_string(correct.size()) + " flags");
  if (num_bins == 0) throw std::invalid_argument("calibration: need at least one bin");
  std::vector<std::vector<double>> conf(num_bins);
  std::vector<std::size_t> hits(num_bins, 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const double c = confidences[i];
    if (!(c >= 0.0 && c <= 1.0))
      throw std::invalid_argument("calibration: confidence " + std::to_string(c) +
                                  " outside [0, 1]");
    const auto b = std::min(static_cast<std::size_t>(c * static_cast<double>(num_bins)), num_bins - 1);
    conf[b].push_back(c);
    hits[b] += correct[i] ? 1 : 0;
  }
  CalibrationResult res;
  const double n = static_cast<double>(confidences.size());
  for (std::size_t b = 0; b < num_bins; ++b) {
    CalibrationBin bin;
    bin.lower = static_cast<double>(b) / num_bins;
    bin.upper = static_cast<double>(b + 1) / num_bins;
    bin.count = conf[b].size();
    if (bin.count > 0) {
      std::sort(conf[b].begin(), conf[b].end());
      bin.mean_confidence =
          std::accumulate(conf[b].begin(), conf[b].end(), 0.0) / static_cast<double>(bin.count);
      bin.accuracy = static_cast<double>(hits[b]) / static_cast<double>(bin.count);
      const double gap = std::abs(bin.accuracy - bin.mean_confidence);
      res.ece += (static_cast<double>(bin.count) / n) * gap;
      res.mce = std::max(res.mce, gap);
    }
    res.bins.push_back(bin);
  }
  return res;
}

// Mean over samples of sum_k (p_k - 1{k = y})^2.
inline double brier(const Matrix& probs, std::span<const std::size_t> labels) {
  if (labels.size() != probs.rows())
    throw ShapeError("brier: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(probs.rows()) + " rows");
  if (labels.empty()) throw std::invalid_argument("brier: no samples");
  double total = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    if (labels[i] >= probs.cols()) throw std::out_of_range("brier: label out of range");
    const auto p = probs.row(i);
    double s = 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double d = p[k] - (k == labels[i] ? 1.0 : 0.0);
      s += d * d;
    }
    total += s;
  }
  return total / static_cast<double>(probs.rows());
}

// P(score_pos > score_neg) + 0.5 P(equal) via mid-ranks.
inline double auroc(std::span<const double> scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size())
    throw ShapeError("auroc: " + std::to_string(scores.size()) + " scores vs " +
                     std::to_string(positive.size()) + " labels");
  const std::size_t n = scores.size();
  std::size_t n_pos = 0;
  for (bool p : positive) n_pos += p ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw std::invalid_argument("auroc: undefined unless both classes are present");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1..j
    for (std::size_t t = i; t < j; ++t)
      if (positive[order[t]]) rank_sum += mid;
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

struct MetricsOptions {
  AggregationRule rule = AggregationRule::logit_mean;
  std::size_t calibration_bins = 15;
};

// Accuracy and the correct/incorrect splits use `rule`. Calibration, Brier and
// failure-detection AUROC use the probability-averaged prediction with
// confidence = max mean probability.
struct MetricsReport {
  std::size_t samples = 0;
  std::size_t particles = 0;
  std::string rule;
  double accuracy = 0.0;
  double mean_entropy = 0.0;
  double mean_entropy_correct = 0.0;
  double mean_entropy_incorrect = 0.0;
  double mean_mi = 0.0;
  double median_mi_correct = 0.0;
  double median_mi_incorrect = 0.0;
  double diversity = 0.0;
  double ece = 0.0;
  double mce = 0.0;
  double brier = 0.0;
  double auroc = 0.0;  // NaN when every prediction is right (or every one wrong)
  std::vector<double> mutual_information;
  std::vector<CalibrationBin> bins;
};

inline MetricsReport evaluate(const PredictiveDistribution& dist,
                              std::span<const std::size_t> labels,
                              const MetricsOptions& opts = {}) {
  if (labels.size() != dist.samples())
    throw ShapeError("evaluate: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(dist.samples()) + " samples");
  if (labels.empty()) throw std::invalid_argument("evaluate: no samples");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  MetricsReport r;
  r.samples = dist.samples();
  r.particles = dist.particles();
  r.rule = to_string(opts.rule);
  const auto pred = classify(dist, opts.rule);
  r.mutual_information = mutual_information(dist);

  std::vector<double> h_ok, h_bad, mi_ok, mi_bad;
  double h_sum = 0.0;
  std::size_t ok = 0;
  for (std::size_t s = 0; s < r.samples; ++s) {
    const double h = predictive_entropy(dist.mean_probs.row(s));
    h_sum += h;
    if (pred[s] == labels[s]) {
      ++ok;
      h_ok.push_back(h);
      mi_ok.push_back(r.mutual_information[s]);
    } else {
      h_bad.push_back(h);
      mi_bad.push_back(r.mutual_information[s]);
    }
  }
  const double n = static_cast<double>(r.samples);
  r.accuracy = static_cast<double>(ok) / n;
  r.mean_entropy = h_sum / n;
  r.mean_entropy_correct =
      h_ok.empty() ? nan : std::accumulate(h_ok.begin(), h_ok.end(), 0.0) / h_ok.size();
  r.mean_entropy_incorrect =
      h_bad.empty() ? nan : std::accumulate(h_bad.begin(), h_bad.end(), 0.0) / h_bad.size();
  r.mean_mi = std::accumulate(r.mutual_information.begin(), r.mutual_information.end(), 0.0) / n;
  r.median_mi_correct = detail::median(mi_ok);
  r.median_mi_incorrect = detail::median(mi_bad);
  r.diversity = diversity(dist);

  const auto prob_pred = argmax_rows(dist.mean_probs);
  std::vector<double> conf(r.samples);
  std::vector<bool> hit(r.samples);
  for (std::size_t s = 0; s < r.samples; ++s) {
    conf[s] = dist.mean_probs(s, prob_pred[s]);
    hit[s] = prob_pred[s] == labels[s];
  }
  const auto cal = calibration(conf, hit, opts.calibration_bins);
  r.ece = cal.ece;
  r.mce = cal.mce;
  r.bins = cal.bins;
  r.brier = brier(dist.mean_probs, labels);
  const auto hits = static_cast<std::size_t>(std::count(hit.begin(), hit.end(), true));
  r.auroc = (hits > 0 && hits < r.samples) ? auroc(conf, hit) : nan;
  return r;
}

}  // namespace bella
