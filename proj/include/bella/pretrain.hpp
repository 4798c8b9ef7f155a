#pragma once

// Full-weight training of the base network on a source task. The result is
// frozen and shared by every particle afterwards.

#include <cstdint>
#include <span>
#include <vector>

#include "bella/data.hpp"
#include "bella/nn.hpp"
#include "bella/optim.hpp"
#include "bella/rng.hpp"

namespace bella {

struct PretrainConfig {
  std::vector<std::size_t> hidden{128, 128};
  Activation activation = Activation::tanh;
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  double learning_rate = 5e-3;
  Schedule schedule = Schedule::cosine;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  MlpModel model;
  double train_accuracy = 0.0;
  double final_loss = 0.0;
};

inline double accuracy(const MlpModel& model, const Dataset& data) {
  const auto pred = argmax_rows(predict_logits(model, data.features));
  std::size_t ok = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == data.labels[i] ? 1 : 0;
  return data.size() ? static_cast<double>(ok) / static_cast<double>(data.size()) : 0.0;
}

// Minimizes mean cross-entropy with Adam. Initialization draws from
// Rng(seed).split("base_init"), minibatches from Rng(seed).split("base_minibatch").
inline PretrainResult pretrain(const Dataset& data, const PretrainConfig& cfg) {
  data.validate();
  if (data.size() == 0) throw std::invalid_argument("pretrain: empty dataset");
  if (cfg.epochs == 0 || cfg.batch_size == 0)
    throw std::invalid_argument("pretrain: epochs and batch_size must be positive");
  std::vector<std::size_t> dims{data.dim()};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(data.num_classes);
  Rng init = Rng(cfg.seed).split("base_init");
  PretrainResult res;
  res.model = init_mlp(init, dims, cfg.activation);

  // Biases ride along as 1 x out matrices so one optimizer handles everything.
  std::vector<Matrix> biases;
  for (const auto& l : res.model.layers) biases.emplace_back(1, l.bias.size(), l.bias);
  std::vector<Matrix*> params;
  for (std::size_t k = 0; k < res.model.layers.size(); ++k) {
    params.push_back(&res.model.layers[k].weight);
    params.push_back(&biases[k]);
  }
  std::vector<const Matrix*> cparams(params.begin(), params.end());
  AdamState state = make_adam_state(cparams);
  AdamConfig adam;
  adam.learning_rate = cfg.learning_rate;
  adam.schedule = cfg.schedule;

  const std::size_t N = data.size();
  const std::size_t bs = std::min(cfg.batch_size, N);
  const std::uint64_t total = cfg.epochs * ((N + bs - 1) / bs);
  const Rng shuffle = Rng(cfg.seed).split("base_minibatch");
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng er = shuffle.split(epoch);
    const auto perm = permutation(er, N);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < N; start += bs) {
      const std::size_t len = std::min(bs, N - start);
      const auto idx = std::span(perm).subspan(start, len);
      const Matrix x = gather_rows(data.features, idx);
      std::vector<std::size_t> y(len);
      for (std::size_t r = 0; r < len; ++r) y[r] = data.labels[idx[r]];
      auto fr = forward(res.model, x);
      auto loss = softmax_cross_entropy(fr.logits, y);
      loss_sum += loss.loss;
      ++batches;
      auto g = backprop(res.model, fr.trace, loss.d_logits);
      // Descent on the loss is ascent on its negation.
      std::vector<Matrix> dirs;
      for (auto& lg : g.layers) {
        dirs.push_back(scale(lg.weight, -1.0));
        Matrix db(1, lg.bias.size(), lg.bias);
        dirs.push_back(scale(db, -1.0));
      }
      std::vector<const Matrix*> dptr;
      for (const auto& d : dirs) dptr.push_back(&d);
      adam_ascent(params, dptr, state, adam, schedule_factor(adam.schedule, step++, total));
      for (std::size_t k = 0; k < biases.size(); ++k)
        res.model.layers[k].bias.assign(biases[k].data().begin(), biases[k].data().end());
    }
    res.final_loss = loss_sum / static_cast<double>(batches);
  }
  for (const auto& l : res.model.layers)
    if (!all_finite(l.weight)) throw NumericError("pretrain: non-finite base weights");
  res.train_accuracy = accuracy(res.model, data);
  return res;
}

}  // namespace bella
