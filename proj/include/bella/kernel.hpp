#pragma once

// RBF kernel between particles' weight perturbations.
//
// For low-rank layers the squared Frobenius distance is expanded as
//   |B_i A_i - B_j A_j|^2 = <A_i A_i^T, B_i^T B_i> + <A_j A_j^T, B_j^T B_j>
//                           - 2 <A_i A_j^T, B_i^T B_j>
// so only r x r Gram matrices are formed, at O(r^2 (d1 + d2)) per pair.
// Distances are summed over all adapted layers before the exponential, i.e.
// one joint kernel on the concatenated perturbations.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "bella/linalg.hpp"
#include "bella/lowrank.hpp"

namespace bella {

enum class BandwidthMode { median_heuristic, fixed };

inline std::string to_string(BandwidthMode m) {
  return m == BandwidthMode::fixed ? "fixed" : "median";
}

inline BandwidthMode parse_bandwidth_mode(std::string_view s) {
  if (s == "median" || s == "median_heuristic") return BandwidthMode::median_heuristic;
  if (s == "fixed") return BandwidthMode::fixed;
  throw std::invalid_argument("unknown bandwidth mode '" + std::string(s) +
                              "' (expected median or fixed)");
}

struct KernelConfig {
  BandwidthMode mode = BandwidthMode::median_heuristic;
  double sigma_sq = 1.0;  // used when mode == fixed

  void validate() const {
    if (mode == BandwidthMode::fixed && !(sigma_sq > 0.0))
      throw std::invalid_argument("KernelConfig: fixed sigma_sq must be positive");
  }
};

inline constexpr double kBandwidthFloor = 1e-8;
inline constexpr double kKernelFloor = 1e-300;

// Symmetric n x n matrix of squared distances with a zero diagonal.
using PairwiseDistances = Matrix;

namespace detail {

inline double lowrank_self_term(const LowRankAdapter& x) {
  return frobenius_dot(matmul_nt(x.a, x.a), matmul_tn(x.b, x.b));
}

inline double lowrank_cross_term(const LowRankAdapter& x, const LowRankAdapter& y) {
  return frobenius_dot(matmul_nt(x.a, y.a), matmul_tn(x.b, y.b));
}

inline double dense_sq_dist(const Matrix& x, const Matrix& y) {
  require_same_shape(x, y, "dense_sq_dist");
  double s = 0.0;
  const auto a = x.data();
  const auto b = y.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

inline void require_structure(std::span<const AdapterStack> particles, const char* op) {
  for (std::size_t i = 1; i < particles.size(); ++i)
    if (!same_structure(particles[i], particles[0]))
      throw ShapeError(std::string(op) + ": particle " + std::to_string(i) +
                       " differs in adapter structure from particle 0");
}

}  // namespace detail

inline PairwiseDistances pairwise_sq_dist(std::span<const AdapterStack> particles) {
  if (particles.empty()) throw std::invalid_argument("pairwise_sq_dist: no particles");
  detail::require_structure(particles, "pairwise_sq_dist");
  const std::size_t n = particles.size();
  const std::size_t layers = particles[0].size();

  std::vector<double> self(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < layers; ++k)
      if (const auto* lr = std::get_if<LowRankAdapter>(&particles[i][k]))
        self[i] += detail::lowrank_self_term(*lr);

  PairwiseDistances d(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double total = 0.0;
      for (std::size_t k = 0; k < layers; ++k) {
        const auto& x = particles[i][k];
        const auto& y = particles[j][k];
        if (const auto* lx = std::get_if<LowRankAdapter>(&x))
          total -= 2.0 * detail::lowrank_cross_term(*lx, std::get<LowRankAdapter>(y));
        else if (const auto* dx = std::get_if<DenseDelta>(&x))
          total += detail::dense_sq_dist(dx->delta, std::get<DenseDelta>(y).delta);
      }
      total += self[i] + self[j];
      d(i, j) = d(j, i) = std::max(total, 0.0);
    }
  }
  return d;
}

inline double rbf(double dist_sq, double sigma_sq) {
  return std::max(std::exp(-dist_sq / (2.0 * sigma_sq)), kKernelFloor);
}

// sigma^2 = median(off-diagonal d^2) / (2 ln(n + 1)), floored at 1e-8. The
// median runs over the n(n-1)/2 unordered pairs; an even count averages the
// two middle values.
inline double median_bandwidth(const PairwiseDistances& d) {
  const std::size_t n = d.rows();
  if (n < 2 || d.cols() != n) throw std::invalid_argument("median_bandwidth: need n >= 2 square");
  std::vector<double> vals;
  vals.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) vals.push_back(d(i, j));
  const std::size_t m = vals.size();
  std::nth_element(vals.begin(), vals.begin() + m / 2, vals.end());
  double med = vals[m / 2];
  if (m % 2 == 0) {
    const double lower = *std::max_element(vals.begin(), vals.begin() + m / 2);
    med = 0.5 * (med + lower);
  }
  return std::max(med / (2.0 * std::log(static_cast<double>(n) + 1.0)), kBandwidthFloor);
}

inline double select_bandwidth(const PairwiseDistances& d, const KernelConfig& cfg) {
  if (cfg.mode == BandwidthMode::fixed) return cfg.sigma_sq;
  if (d.rows() < 2) return 1.0;
  return median_bandwidth(d);
}

inline Matrix kernel_matrix(const PairwiseDistances& d, double sigma_sq) {
  Matrix k(d.rows(), d.cols());
  for (std::size_t i = 0; i < d.rows(); ++i)
    for (std::size_t j = 0; j < d.cols(); ++j) k(i, j) = rbf(d(i, j), sigma_sq);
  return k;
}

// Gradient of k(i, j) = rbf(|delta_i - delta_j|^2) with respect to particle
// i's own parameters:
//   dB_i = -(k / s2) (B_i (A_i A_i^T) - B_j (A_j A_i^T))
//   dA_i = -(k / s2) ((B_i^T B_i) A_i - (B_i^T B_j) A_j)
//   dD_i = -(k / s2) (D_i - D_j)
inline AdapterStack kernel_grads(std::size_t i, std::size_t j,
                                 std::span<const AdapterStack> particles, double k_ij,
                                 double sigma_sq) {
  if (i >= particles.size() || j >= particles.size())
    throw std::out_of_range("kernel_grads: index (" + std::to_string(i) + ", " +
                            std::to_string(j) + ") out of range for " +
                            std::to_string(particles.size()) + " particles");
  const auto& pi = particles[i];
  const auto& pj = particles[j];
  if (!same_structure(pi, pj)) throw ShapeError("kernel_grads: particles differ in structure");
  if (i == j) return zeros_like(pi);  // exact zero; the trace trick leaves rounding residue
  const double c = -k_ij / sigma_sq;
  AdapterStack g(pi.size());
  for (std::size_t k = 0; k < pi.size(); ++k) {
    if (const auto* xi = std::get_if<LowRankAdapter>(&pi[k])) {
      const auto& xj = std::get<LowRankAdapter>(pj[k]);
      Matrix db = matmul(xi->b, matmul_nt(xi->a, xi->a));
      axpy(db, matmul(xj.b, matmul_nt(xj.a, xi->a)), -1.0);
      Matrix da = matmul(matmul_tn(xi->b, xi->b), xi->a);
      axpy(da, matmul(matmul_tn(xi->b, xj.b), xj.a), -1.0);
      for (double& v : db.data()) v *= c;
      for (double& v : da.data()) v *= c;
      g[k] = LowRankAdapter{std::move(db), std::move(da)};
    } else if (const auto* xi = std::get_if<DenseDelta>(&pi[k])) {
      Matrix dd = add_scaled(xi->delta, std::get<DenseDelta>(pj[k]).delta, -1.0);
      for (double& v : dd.data()) v *= c;
      g[k] = DenseDelta{std::move(dd)};
    }
  }
  return g;
}

}  // namespace bella
