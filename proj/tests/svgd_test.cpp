#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <vector>

#include "bella/data.hpp"
#include "bella/svgd.hpp"
#include "test_util.hpp"

using namespace bella;
using test::central_diff;
using test::random_matrix;
using test::rel_err;

namespace {

std::shared_ptr<const MlpModel> small_net(std::uint64_t seed, std::vector<std::size_t> dims) {
  Rng rng(seed);
  return std::make_shared<const MlpModel>(init_mlp(rng, dims, Activation::tanh));
}

double log_posterior(const std::shared_ptr<const MlpModel>& base, const AdapterStack& ad,
                     const Matrix& x, std::span<const std::size_t> y, const PosteriorSpec& spec) {
  double lp = 0.0;
  if (spec.dataset_size != 0.0) {
    const MlpModel m = AdaptedModel{base, ad}.materialize();
    lp -= spec.dataset_size * softmax_cross_entropy(predict_logits(m, x), y).loss;
  }
  for (const Matrix* p : parameters(ad))
    for (double v : p->data()) lp -= v * v / (2.0 * spec.prior_variance);
  return lp;
}

double min_pairwise(const std::vector<AdapterStack>& ps) {
  const auto d = pairwise_sq_dist(ps);
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < d.rows(); ++i)
    for (std::size_t j = i + 1; j < d.cols(); ++j) m = std::min(m, d(i, j));
  return m;
}

Dataset blobs_for(std::uint64_t seed) {
  return gen_blobs(2, 100, 0.5, seed);
}

}  // namespace

TEST(TrainConfig, ModeInvariants) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.mode = TrainMode::single;
  c.gamma = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.n_particles = 1;
  EXPECT_NO_THROW(c.validate());
  c.mode = TrainMode::ensemble;
  c.gamma = 0.01;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.gamma = 0.0;
  c.prior_variance = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(ParticleSet, SharesBaseAndMirrorsOptimizerShapes) {
  const auto base = small_net(1, {2, 8, 8, 2});
  TrainConfig c;
  c.rank = 2;
  c.layers = "all";
  const auto set = make_particle_set(base, c);
  ASSERT_EQ(set.size(), 5u);
  EXPECT_EQ(set.base.get(), base.get());
  for (const auto& p : set.particles) {
    const auto params = parameters(p.adapters);
    ASSERT_EQ(params.size(), p.optimizer.first_moment.size());
    for (std::size_t t = 0; t < params.size(); ++t) {
      EXPECT_TRUE(params[t]->same_shape(p.optimizer.first_moment[t]));
      EXPECT_TRUE(params[t]->same_shape(p.optimizer.second_moment[t]));
    }
  }
  EXPECT_FALSE(set.particles[0].adapters == set.particles[1].adapters);
}

TEST(LogPosteriorGrad, MatchesFiniteDifferences) {
  const auto base = small_net(2, {3, 5, 4});
  const Matrix x = random_matrix(3, 7, 3);
  const std::vector<std::size_t> y = {0, 3, 1, 2, 2, 0, 1};
  const LayerMask mask(2, true);
  AdapterStack ad = init_adapter_stack(Rng(4), base->topology(), mask, AdapterKind::low_rank, 2, 0.5);
  const PosteriorSpec spec{40.0, 0.7};
  const auto g = log_posterior_grad(base, ad, x, y, spec);
  const auto gp = parameters(g.grad);
  auto pp = parameters(ad);
  double worst = 0.0;
  for (std::size_t t = 0; t < pp.size(); ++t)
    for (std::size_t r = 0; r < pp[t]->rows(); ++r)
      for (std::size_t c = 0; c < pp[t]->cols(); ++c) {
        const double num = central_diff(*pp[t], r, c, [&] { return log_posterior(base, ad, x, y, spec); });
        worst = std::max(worst, rel_err((*gp[t])(r, c), num));
      }
  EXPECT_LT(worst, 1e-5);
}

TEST(LogPosteriorGrad, PurePriorIsExact) {
  const auto base = small_net(5, {2, 4, 2});
  const LayerMask mask(2, true);
  const AdapterStack ad = init_adapter_stack(Rng(6), base->topology(), mask, AdapterKind::low_rank, 1, 1.0);
  const Matrix x = random_matrix(7, 3, 2);
  const std::vector<std::size_t> y = {0, 1, 1};
  const auto g = log_posterior_grad(base, ad, x, y, PosteriorSpec{0.0, 2.5});
  const auto gp = parameters(g.grad);
  const auto pp = parameters(ad);
  for (std::size_t t = 0; t < pp.size(); ++t)
    for (std::size_t e = 0; e < pp[t]->size(); ++e)
      EXPECT_EQ(gp[t]->data()[e], -pp[t]->data()[e] / 2.5);
}

TEST(LogPosteriorGrad, FlatPriorWithoutLikelihoodIsZero) {
  const auto base = small_net(8, {2, 4, 2});
  const LayerMask mask(2, true);
  const AdapterStack ad = init_adapter_stack(Rng(9), base->topology(), mask, AdapterKind::low_rank, 1, 1.0);
  const auto g = log_posterior_grad(base, ad, Matrix(1, 2), std::vector<std::size_t>{0},
                                    PosteriorSpec{0.0, 1e300});
  for (const Matrix* p : parameters(g.grad))
    for (double v : p->data()) EXPECT_LT(std::abs(v), 1e-290);
}

TEST(LogPosteriorGrad, LeavesBaseUntouched) {
  const auto base = small_net(10, {2, 6, 3});
  const MlpModel before = *base;
  const LayerMask mask(2, true);
  const AdapterStack ad = init_adapter_stack(Rng(11), base->topology(), mask, AdapterKind::low_rank, 2, 1.0);
  log_posterior_grad(base, ad, random_matrix(12, 4, 2), std::vector<std::size_t>{0, 1, 2, 0},
                     PosteriorSpec{10.0, 1.0});
  EXPECT_TRUE(*base == before);
}

TEST(SvgdDirection, SingleParticleIsOwnGradient) {
  const std::vector<std::size_t> dims = {2, 6, 3};
  const auto base = small_net(13, dims);
  const LayerMask mask(2, true);
  const std::vector<AdapterStack> ps = {
      init_adapter_stack(Rng(14), base->topology(), mask, AdapterKind::low_rank, 2, 1.0)};
  const std::vector<AdapterStack> gs = {
      init_adapter_stack(Rng(15), base->topology(), mask, AdapterKind::low_rank, 2, 1.0)};
  const auto d = pairwise_sq_dist(ps);
  const double s2 = select_bandwidth(d, KernelConfig{});
  const auto dir = svgd_direction(ps, gs, kernel_matrix(d, s2), s2, 0.7);
  ASSERT_EQ(dir.size(), 1u);
  EXPECT_TRUE(dir[0] == gs[0]);
}

TEST(SvgdDirection, TinyBandwidthWithoutRepulsionIsOwnGradientOverN) {
  const auto base = small_net(16, {3, 5, 2});
  const LayerMask mask(2, true);
  std::vector<AdapterStack> ps, gs;
  for (std::uint64_t i = 0; i < 4; ++i) {
    ps.push_back(init_adapter_stack(Rng(20 + i), base->topology(), mask, AdapterKind::low_rank, 2, 1.0));
    gs.push_back(init_adapter_stack(Rng(30 + i), base->topology(), mask, AdapterKind::low_rank, 2, 1.0));
  }
  const auto d = pairwise_sq_dist(ps);
  const double s2 = kBandwidthFloor;
  const auto dir = svgd_direction(ps, gs, kernel_matrix(d, s2), s2, 0.0);
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto got = parameters(dir[i]);
    const auto want = parameters(gs[i]);
    for (std::size_t t = 0; t < got.size(); ++t)
      for (std::size_t e = 0; e < got[t]->size(); ++e)
        EXPECT_NEAR(4.0 * got[t]->data()[e], want[t]->data()[e], 1e-12);
  }
}

TEST(SvgdDirection, MismatchedInputsThrow) {
  const auto base = small_net(17, {2, 4, 2});
  const LayerMask mask(2, true);
  const std::vector<AdapterStack> ps = {
      init_adapter_stack(Rng(1), base->topology(), mask, AdapterKind::low_rank, 1, 1.0),
      init_adapter_stack(Rng(2), base->topology(), mask, AdapterKind::low_rank, 1, 1.0)};
  const std::vector<AdapterStack> one = {ps[0]};
  EXPECT_THROW(svgd_direction(ps, one, Matrix(2, 2), 1.0, 0.1), ShapeError);
  EXPECT_THROW(svgd_direction(ps, ps, Matrix(3, 3), 1.0, 0.1), ShapeError);
  const std::vector<AdapterStack> other = {
      ps[0], init_adapter_stack(Rng(3), base->topology(), mask, AdapterKind::low_rank, 2, 1.0)};
  EXPECT_THROW(svgd_direction(ps, other, Matrix(2, 2), 1.0, 0.1), ShapeError);
}

// Same snapshot and gradients, small explicit step: repulsion widens the
// closest pair.
TEST(SvgdDirection, RepulsionIncreasesMinimumDistance) {
  const auto base = small_net(18, {3, 6, 2});
  const LayerMask mask(2, true);
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    std::vector<AdapterStack> ps, gs;
    for (std::uint64_t i = 0; i < 5; ++i) {
      ps.push_back(init_adapter_stack(Rng(100 * trial + i), base->topology(), mask,
                                      AdapterKind::low_rank, 2, 0.3));
      gs.push_back(init_adapter_stack(Rng(100 * trial + 50 + i), base->topology(), mask,
                                      AdapterKind::low_rank, 2, 1.0));
    }
    const auto d = pairwise_sq_dist(ps);
    const double s2 = median_bandwidth(d);
    const Matrix k = kernel_matrix(d, s2);
    const auto plain = svgd_direction(ps, gs, k, s2, 0.0);
    const auto pushed = svgd_direction(ps, gs, k, s2, 1.0);
    auto step = [&](const std::vector<AdapterStack>& dirs) {
      auto out = ps;
      for (std::size_t i = 0; i < out.size(); ++i) axpy(out[i], dirs[i], 1e-3);
      return min_pairwise(out);
    };
    EXPECT_GT(step(pushed), step(plain)) << "trial " << trial;
  }
}

TEST(ApplyUpdate, ZeroDirectionLeavesParameters) {
  const auto base = small_net(19, {2, 4, 2});
  TrainConfig c;
  c.rank = 1;
  c.layers = "all";
  auto set = make_particle_set(base, c);
  Particle& p = set.particles[0];
  const AdapterStack before = p.adapters;
  for (int s = 0; s < 10; ++s) apply_update(p, zeros_like(p.adapters), c.adam());
  EXPECT_TRUE(p.adapters == before);
  EXPECT_EQ(p.optimizer.step, 10u);
}

TEST(ApplyUpdate, ConstantDirectionFollowsScalarRecurrence) {
  const double g = 0.37, lr = 0.01;
  AdamConfig cfg;
  cfg.learning_rate = lr;
  cfg.schedule = Schedule::constant;
  Particle p;
  p.adapters = AdapterStack{DenseDelta{Matrix(1, 1)}};
  const AdapterStack& cref = p.adapters;
  p.optimizer = make_adam_state(parameters(cref));
  const AdapterStack dir{DenseDelta{Matrix(1, 1, {g})}};

  double x = 0.0, m = 0.0, v = 0.0, last_move = 0.0;
  for (int t = 1; t <= 500; ++t) {
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double move = lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    x += move;
    last_move = move;
    apply_update(p, dir, cfg);
    ASSERT_NEAR(std::get<DenseDelta>(p.adapters[0]).delta(0, 0), x, 1e-13) << "step " << t;
  }
  // Bias-corrected moments of a constant input are exact, so each step moves lr * g / (|g| + eps).
  EXPECT_NEAR(last_move, lr * g / (g + 1e-8), 1e-15);
}

TEST(ApplyUpdate, IdenticalStateAndDirectionUpdateIdentically) {
  const auto base = small_net(20, {2, 5, 2});
  TrainConfig c;
  c.rank = 2;
  c.layers = "all";
  auto set = make_particle_set(base, c);
  Particle a = set.particles[0], b = set.particles[0];
  const auto dir = init_adapter_stack(Rng(21), base->topology(), set.mask, AdapterKind::low_rank, 2, 1.0);
  for (int s = 0; s < 5; ++s) {
    apply_update(a, dir, c.adam(), 0.5);
    apply_update(b, dir, c.adam(), 0.5);
  }
  EXPECT_TRUE(a.adapters == b.adapters);
  EXPECT_TRUE(a.optimizer == b.optimizer);
}

TEST(Train, SingleModeFitsSeparableBlobs) {
  const auto base = small_net(22, {2, 16, 2});
  const Dataset data = blobs_for(23);
  TrainConfig c;
  c.mode = TrainMode::single;
  c.n_particles = 1;
  c.gamma = 0.0;
  c.rank = 2;
  c.layers = "all";
  c.epochs = 200;
  c.learning_rate = 1e-2;
  c.init_scale = 0.5;
  c.seed = 24;
  auto set = make_particle_set(base, c);
  const auto logs = train(set, data, c);
  ASSERT_EQ(logs.size(), 200u);
  const auto pred = argmax_rows(predict_logits(set.materialize(0), data.features));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
  EXPECT_GE(static_cast<double>(correct) / data.size(), 0.99);
}

TEST(Train, EnsembleParticlesDiverge) {
  const auto base = small_net(25, {2, 16, 2});
  const Dataset data = gen_two_moons(200, 0.2, 26);
  TrainConfig c;
  c.mode = TrainMode::ensemble;
  c.n_particles = 2;
  c.gamma = 0.0;
  c.rank = 2;
  c.layers = "all";
  c.epochs = 40;
  c.seed = 27;
  c.init_scale = 0.3;  // at 2.0 the prior shrinks the initial deltas faster than the data spreads them
  auto set = make_particle_set(base, c);
  const double init = mean_pairwise_distance(pairwise_sq_dist(set.snapshot()));
  const auto logs = train(set, data, c);
  EXPECT_GT(logs.back().mean_pairwise_distance, init);
}

TEST(Train, DeterministicAcrossWorkerCounts) {
  const auto base = small_net(28, {2, 12, 2});
  const Dataset data = gen_two_moons(150, 0.2, 29);
  TrainConfig c;
  c.n_particles = 4;
  c.rank = 2;
  c.layers = "all";
  c.epochs = 5;
  c.gamma = 0.05;
  c.seed = 30;
  auto a = make_particle_set(base, c);
  auto b = make_particle_set(base, c);
  const auto la = train(a, data, c, TrainOptions{1, {}});
  const auto lb = train(b, data, c, TrainOptions{3, {}});
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE(a.particles[i].adapters == b.particles[i].adapters);
    EXPECT_TRUE(a.particles[i].optimizer == b.particles[i].optimizer);
  }
  for (std::size_t e = 0; e < la.size(); ++e) EXPECT_EQ(la[e].to_line(), lb[e].to_line());
}

TEST(Train, BaseStaysBitIdentical) {
  const auto base = small_net(31, {2, 10, 2});
  const MlpModel before = *base;
  const Dataset data = gen_two_moons(100, 0.2, 32);
  TrainConfig c;
  c.rank = 2;
  c.layers = "all";
  c.epochs = 10;
  auto set = make_particle_set(base, c);
  train(set, data, c);
  EXPECT_TRUE(*base == before);
}

TEST(Train, EmitsOneLogPerEpoch) {
  const auto base = small_net(33, {2, 8, 2});
  const Dataset data = gen_two_moons(64, 0.2, 34);
  TrainConfig c;
  c.rank = 2;
  c.layers = "all";
  c.epochs = 3;
  auto set = make_particle_set(base, c);
  std::vector<std::size_t> seen;
  const auto logs = train(set, data, c, TrainOptions{1, [&](const EpochLog& e) { seen.push_back(e.epoch); }});
  EXPECT_EQ(seen, (std::vector<std::size_t>{1, 2, 3}));
  for (const auto& e : logs) {
    EXPECT_TRUE(std::isfinite(e.loss));
    EXPECT_GT(e.bandwidth, 0.0);
    EXPECT_NE(e.to_line().find("mean_pairwise_distance="), std::string::npos);
  }
}

TEST(Train, DivergenceNamesTensor) {
  const auto base = small_net(35, {2, 8, 2});
  const Dataset data = gen_two_moons(64, 0.2, 36);
  TrainConfig c;
  c.rank = 2;
  c.layers = "all";
  c.epochs = 2;
  c.learning_rate = 1e308;
  auto set = make_particle_set(base, c);
  try {
    train(set, data, c);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("particle"), std::string::npos) << msg;
    EXPECT_NE(msg.find("layer"), std::string::npos) << msg;
  }
}

TEST(Train, RejectsMismatchedData) {
  const auto base = small_net(37, {2, 8, 2});
  TrainConfig c;
  c.rank = 2;
  c.layers = "all";
  auto set = make_particle_set(base, c);
  EXPECT_THROW(train(set, gen_blobs(3, 10, 0.5, 1), c), ShapeError);
  c.n_particles = 3;
  EXPECT_THROW(train(set, gen_two_moons(20, 0.2, 1), c), std::invalid_argument);
}

TEST(AnalyticSvgd, StandardNormalMoments) {
  AnalyticConfig c;
  c.schedule = Schedule::cosine;
  const std::vector<double> mean0 = {2.0};
  const Matrix x = analytic_svgd([](std::span<const double> v) { return std::vector<double>{-v[0]}; },
                                 30, mean0, 0.5, 1, c);
  double m = 0.0;
  for (std::size_t i = 0; i < 30; ++i) m += x(i, 0);
  m /= 30.0;
  double var = 0.0;
  for (std::size_t i = 0; i < 30; ++i) var += (x(i, 0) - m) * (x(i, 0) - m);
  const double sd = std::sqrt(var / 30.0);
  EXPECT_NEAR(m, 0.0, 0.05);
  EXPECT_NEAR(sd, 1.0, 0.1);
}

TEST(AnalyticSvgd, PeakedTargetCollapsesToMode) {
  AnalyticConfig c;
  c.schedule = Schedule::cosine;
  const std::vector<double> mean0 = {-1.0};
  const Matrix x = analytic_svgd(
      [](std::span<const double> v) { return std::vector<double>{-(v[0] - 2.0) / 1e-4}; }, 20, mean0,
      1.0, 2, c);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(x(i, 0), 2.0, 0.05) << "particle " << i;
}

TEST(AnalyticSvgd, BimodalMixtureCoverage) {
  auto mixture = [](std::span<const double> v) {
    const double a = std::exp(-0.5 * (v[0] + 3) * (v[0] + 3)), b = std::exp(-0.5 * (v[0] - 3) * (v[0] - 3));
    return std::vector<double>{(-(v[0] + 3) * a - (v[0] - 3) * b) / (a + b)};
  };
  auto positive = [](const Matrix& x) {
    double k = 0;
    for (std::size_t i = 0; i < x.rows(); ++i) k += x(i, 0) > 0;
    return k / x.rows();
  };
  const std::vector<double> centred = {0.0};
  const Matrix svgd = analytic_svgd(mixture, 50, centred, 1.0, 3, AnalyticConfig{});
  EXPECT_GE(positive(svgd), 0.3);
  EXPECT_LE(positive(svgd), 0.7);

  // Independent ascent from one side never leaves the left mode.
  AnalyticConfig c;
  c.mode = TrainMode::ensemble;
  c.gamma = 0.0;
  const std::vector<double> left = {-4.0};
  EXPECT_LT(positive(analytic_svgd(mixture, 50, left, 1.0, 3, c)), 0.05);
}

TEST(AnalyticSvgd, CorrelatedGaussianCovariance) {
  // Sigma = [[1, 0.6], [0.6, 0.8]]; grad log p = -Sigma^-1 x.
  const double s00 = 1.0, s01 = 0.6, s11 = 0.8, det = s00 * s11 - s01 * s01;
  const double p00 = s11 / det, p01 = -s01 / det, p11 = s00 / det;
  auto grad = [&](std::span<const double> v) {
    return std::vector<double>{-(p00 * v[0] + p01 * v[1]), -(p01 * v[0] + p11 * v[1])};
  };
  AnalyticConfig c;
  c.steps = 3000;
  c.schedule = Schedule::cosine;
  const std::size_t n = 100;
  const std::vector<double> mean0 = {0.0, 0.0};
  const Matrix x = analytic_svgd(grad, n, mean0, 0.3, 4, c);
  double m0 = 0, m1 = 0;
  for (std::size_t i = 0; i < n; ++i) m0 += x(i, 0), m1 += x(i, 1);
  m0 /= n, m1 /= n;
  double c00 = 0, c01 = 0, c11 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    c00 += (x(i, 0) - m0) * (x(i, 0) - m0);
    c01 += (x(i, 0) - m0) * (x(i, 1) - m1);
    c11 += (x(i, 1) - m1) * (x(i, 1) - m1);
  }
  c00 /= n, c01 /= n, c11 /= n;
  const double err = std::sqrt((c00 - s00) * (c00 - s00) + 2 * (c01 - s01) * (c01 - s01) + (c11 - s11) * (c11 - s11));
  const double ref = std::sqrt(s00 * s00 + 2 * s01 * s01 + s11 * s11);
  EXPECT_LT(err / ref, 0.15);
}

TEST(AnalyticSvgd, RejectsHighDimension) {
  const std::vector<double> mean0(11, 0.0);
  EXPECT_THROW(analytic_svgd([](std::span<const double> v) { return std::vector<double>(v.size()); }, 3,
                             mean0, 1.0, 0, AnalyticConfig{}),
               std::invalid_argument);
}
