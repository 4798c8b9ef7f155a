#pragma once

// Counter-based random streams.
//
// A stream is a 64-bit key plus a draw counter. Draw k of a stream is
//   mix(mix(key + k * 0x9E3779B97F4A7C15) ^ rotl(key, 29))
// where mix is the SplitMix64 finalizer. Child streams are keyed by
// mix(key ^ mix(stream_id + 0xD1B54A32D192ED03)), so a child depends only on
// its parent and its id and never on how many siblings were drawn before it.
// Normals use Box-Muller on two uniforms; std::normal_distribution is avoided
// because its output is implementation defined.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "bella/linalg.hpp"

namespace bella {

namespace detail {

constexpr std::uint64_t mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace detail

class Rng {
public:
  explicit Rng(std::uint64_t seed) : key_(detail::mix64(seed ^ 0x6A09E667F3BCC909ULL)) {}

  Rng split(std::uint64_t stream_id) const {
    return from_key(detail::mix64(key_ ^ detail::mix64(stream_id + 0xD1B54A32D192ED03ULL)));
  }
  Rng split(std::string_view name) const { return split(detail::fnv1a(name)); }

  std::uint64_t next_u64() {
    ++counter_;
    const std::uint64_t z = detail::mix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
    return detail::mix64(z ^ detail::rotl(key_, 29));
  }

  // Uniform on the open interval (0, 1).
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Uniform integer in [0, bound), rejection sampled so there is no modulo bias.
  std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) throw std::invalid_argument("Rng::below: bound must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % bound;
  }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

private:
  Rng() = default;
  static Rng from_key(std::uint64_t key) {
    Rng r;
    r.key_ = key;
    return r;
  }

  std::uint64_t key_ = 0;
  std::uint64_t counter_ = 0;
};

inline Matrix gaussian_fill(Rng& rng, std::size_t rows, std::size_t cols, double mean,
                            double stddev) {
  if (!(stddev >= 0.0)) throw std::invalid_argument("gaussian_fill: negative standard deviation");
  Matrix out(rows, cols, mean);
  if (stddev == 0.0) return out;
  for (double& v : out.data()) v = rng.normal(mean, stddev);
  return out;
}

// Fisher-Yates permutation of 0..n-1.
inline std::vector<std::size_t> permutation(Rng& rng, std::size_t n) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.below(i);
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace bella
