#pragma once

// Adaptive-moment optimizer used for every trainable tensor in the library.
// Updates *ascend* the supplied direction. There is no weight decay: the
// Gaussian prior already appears in the log-posterior gradient.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bella/linalg.hpp"

namespace bella {

enum class Schedule { constant, cosine };

inline std::string to_string(Schedule s) { return s == Schedule::cosine ? "cosine" : "constant"; }

inline Schedule parse_schedule(std::string_view name) {
  if (name == "constant") return Schedule::constant;
  if (name == "cosine") return Schedule::cosine;
  throw std::invalid_argument("unknown schedule '" + std::string(name) +
                              "' (expected constant or cosine)");
}

struct AdamConfig {
  double learning_rate = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  Schedule schedule = Schedule::cosine;
};

// Multiplier on the base learning rate at `step` (0-based) out of `total`.
// Cosine annealing goes from 1 down to 0.01 at the last step.
inline double schedule_factor(Schedule s, std::uint64_t step, std::uint64_t total) {
  if (s == Schedule::constant || total <= 1) return 1.0;
  const double t = static_cast<double>(std::min(step, total - 1)) / static_cast<double>(total - 1);
  return 0.01 + 0.99 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

struct AdamState {
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
  std::uint64_t step = 0;

  friend bool operator==(const AdamState&, const AdamState&) = default;
};

inline AdamState make_adam_state(std::span<const Matrix* const> params) {
  AdamState s;
  for (const Matrix* p : params) {
    s.first_moment.emplace_back(p->rows(), p->cols());
    s.second_moment.emplace_back(p->rows(), p->cols());
  }
  return s;
}

// One bias-corrected Adam step: p += lr * m_hat / (sqrt(v_hat) + eps).
inline void adam_ascent(std::span<Matrix* const> params, std::span<const Matrix* const> directions,
                        AdamState& state, const AdamConfig& cfg, double lr_factor = 1.0) {
  if (params.size() != directions.size() || params.size() != state.first_moment.size())
    throw ShapeError("adam_ascent: " + std::to_string(params.size()) + " params, " +
                     std::to_string(directions.size()) + " directions, " +
                     std::to_string(state.first_moment.size()) + " moment slots");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const double lr = cfg.learning_rate * lr_factor;
  for (std::size_t k = 0; k < params.size(); ++k) {
    detail::require_same_shape(*params[k], *directions[k], "adam_ascent");
    auto p = params[k]->data();
    const auto g = directions[k]->data();
    auto m = state.first_moment[k].data();
    auto v = state.second_moment[k].data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      p[i] += lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

}  // namespace bella
