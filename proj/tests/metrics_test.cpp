#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "bella/metrics.hpp"
#include "test_util.hpp"

using namespace bella;
using test::random_matrix;

namespace {

std::vector<Matrix> random_logits(std::uint64_t seed, std::size_t n, std::size_t rows, std::size_t k) {
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_matrix(seed * 100 + i, rows, k, 2.0));
  return out;
}

long double entropy_ld(const Matrix& p, std::size_t r) {
  long double h = 0.0L;
  for (std::size_t k = 0; k < p.cols(); ++k)
    if (p(r, k) > 0) h -= static_cast<long double>(p(r, k)) * std::log(static_cast<long double>(p(r, k)));
  return h;
}

}  // namespace

TEST(Entropy, OneHotIsZero) {
  const std::vector<double> p = {0.0, 1.0, 0.0};
  EXPECT_EQ(predictive_entropy(p), 0.0);
}

TEST(Entropy, UniformIsLogK) {
  const std::vector<double> p(10, 0.1);
  EXPECT_NEAR(predictive_entropy(p), std::log(10.0), 1e-12);
}

TEST(Entropy, MatchesExtendedPrecisionSum) {
  const Matrix p = softmax(random_matrix(1, 5, 7, 3.0));
  for (std::size_t r = 0; r < 5; ++r)
    EXPECT_NEAR(predictive_entropy(p.row(r)), static_cast<double>(entropy_ld(p, r)), 1e-12);
}

TEST(MutualInformation, IdenticalParticlesGiveZero) {
  const Matrix z = random_matrix(2, 6, 4);
  const std::vector<Matrix> logits = {z, z, z};
  for (double v : mutual_information(predictive_from_logits(logits))) EXPECT_EQ(v, 0.0);
}

TEST(MutualInformation, OppositeOneHotIsLog2) {
  PredictiveDistribution d;
  d.per_particle_probs = {Matrix(1, 2, {1.0, 0.0}), Matrix(1, 2, {0.0, 1.0})};
  d.mean_probs = Matrix(1, 2, {0.5, 0.5});
  d.mean_logits = Matrix(1, 2);
  EXPECT_NEAR(mutual_information(d)[0], std::numbers::ln2, 1e-15);
}

TEST(MutualInformation, MatchesExtendedPrecisionFormula) {
  const auto dist = predictive_from_logits(random_logits(3, 4, 12, 5));
  const auto mi = mutual_information(dist);
  for (std::size_t s = 0; s < 12; ++s) {
    long double h_each = 0.0L;
    for (const auto& p : dist.per_particle_probs) h_each += entropy_ld(p, s);
    Matrix mean(1, 5);
    for (std::size_t k = 0; k < 5; ++k) {
      long double m = 0.0L;
      for (const auto& p : dist.per_particle_probs) m += p(s, k);
      mean(0, k) = static_cast<double>(m / 4.0L);
    }
    const double oracle = static_cast<double>(entropy_ld(mean, 0) - h_each / 4.0L);
    EXPECT_NEAR(mi[s], oracle, 1e-10);
    EXPECT_GE(mi[s], 0.0);
    EXPECT_LE(mi[s], predictive_entropy(dist.mean_probs.row(s)) + 1e-9);
  }
}

TEST(Diversity, IdenticalParticlesGiveZero) {
  const Matrix z = random_matrix(4, 8, 3);
  const std::vector<Matrix> logits = {z, z};
  EXPECT_EQ(diversity(predictive_from_logits(logits)), 0.0);
}

TEST(Diversity, HandComputedTwoClassFixture) {
  PredictiveDistribution d;
  d.per_particle_probs = {Matrix(1, 2, {0.9, 0.1}), Matrix(1, 2, {0.1, 0.9})};
  d.mean_probs = Matrix(1, 2, {0.5, 0.5});
  d.mean_logits = Matrix(1, 2);
  const double kl = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  EXPECT_NEAR(diversity(d), kl, 1e-15);
  EXPECT_NEAR(diversity(d), 0.510826, 1e-6);
}

TEST(Diversity, PermutationInvariant) {
  auto logits = random_logits(5, 4, 10, 3);
  const double a = diversity(predictive_from_logits(logits));
  std::reverse(logits.begin(), logits.end());
  std::swap(logits[1], logits[3]);
  EXPECT_EQ(diversity(predictive_from_logits(logits)), a);
}

TEST(Calibration, PerfectlyCalibratedFixture) {
  // Two bins of ten: confidence 0.25 with 1 in 4 right, 0.75 with 3 in 4 right.
  std::vector<double> conf;
  std::vector<bool> ok;
  for (int i = 0; i < 8; ++i) conf.push_back(0.25), ok.push_back(i % 4 == 0);
  for (int i = 0; i < 8; ++i) conf.push_back(0.75), ok.push_back(i % 4 != 0);
  const auto c = calibration(conf, ok, 10);
  EXPECT_NEAR(c.ece, 0.0, 1e-15);
  EXPECT_NEAR(c.mce, 0.0, 1e-15);
}

TEST(Calibration, ConfidentlyWrong) {
  const std::vector<double> conf(7, 1.0);
  const std::vector<bool> ok(7, false);
  const auto c = calibration(conf, ok);
  EXPECT_EQ(c.ece, 1.0);
  EXPECT_EQ(c.mce, 1.0);
  EXPECT_EQ(c.bins.back().count, 7u);
}

TEST(Calibration, MatchesBruteForceBinning) {
  Rng rng(6);
  std::vector<double> conf;
  std::vector<bool> ok;
  for (int i = 0; i < 200; ++i) {
    conf.push_back(0.3 + 0.7 * rng.uniform());
    ok.push_back(rng.uniform() < conf.back());
  }
  conf[0] = 1.0;
  const std::size_t B = 15;
  const auto c = calibration(conf, ok, B);
  double ece = 0.0, mce = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double lo = static_cast<double>(b) / B, hi = static_cast<double>(b + 1) / B;
    double cs = 0.0, as = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < conf.size(); ++i) {
      const bool in = (conf[i] >= lo && conf[i] < hi) || (b == B - 1 && conf[i] == 1.0);
      if (!in) continue;
      ++n;
      cs += conf[i];
      as += ok[i] ? 1.0 : 0.0;
    }
    if (n == 0) continue;
    const double gap = std::abs(cs / n - as / n);
    ece += gap * n / conf.size();
    mce = std::max(mce, gap);
    EXPECT_EQ(c.bins[b].count, n) << "bin " << b;
  }
  EXPECT_NEAR(c.ece, ece, 1e-12);
  EXPECT_NEAR(c.mce, mce, 1e-12);
}

TEST(Calibration, RejectsBadInput) {
  const std::vector<double> conf = {0.5, 1.2};
  const std::vector<bool> ok = {true, false};
  EXPECT_THROW(calibration(conf, ok), std::invalid_argument);
  const std::vector<bool> short_ok = {true};
  const std::vector<double> fine = {0.5, 0.6};
  EXPECT_ANY_THROW(calibration(fine, short_ok));
  EXPECT_THROW(calibration(fine, ok, 0), std::invalid_argument);
}

TEST(Brier, PerfectIsZero) {
  const Matrix p(2, 3, {0, 1, 0, 1, 0, 0});
  const std::vector<std::size_t> y = {1, 0};
  EXPECT_EQ(brier(p, y), 0.0);
}

TEST(Brier, UniformTenClasses) {
  const Matrix p(3, 10, 0.1);
  const std::vector<std::size_t> y = {0, 4, 9};
  EXPECT_NEAR(brier(p, y), 0.9, 1e-12);
}

TEST(Brier, MatchesPerEntryOracle) {
  const Matrix p = softmax(random_matrix(7, 25, 4, 2.0));
  std::vector<std::size_t> y;
  Rng rng(8);
  for (int i = 0; i < 25; ++i) y.push_back(rng.below(4));
  double s = 0.0;
  for (std::size_t r = 0; r < 25; ++r)
    for (std::size_t k = 0; k < 4; ++k) {
      const double t = k == y[r] ? 1.0 : 0.0;
      s += (p(r, k) - t) * (p(r, k) - t);
    }
  EXPECT_NEAR(brier(p, y), s / 25.0, 1e-12);
}

TEST(Auroc, SeparatedScores) {
  const std::vector<double> s = {0.9, 0.8, 0.3, 0.1};
  EXPECT_EQ(auroc(s, {true, true, false, false}), 1.0);
  EXPECT_EQ(auroc(s, {false, false, true, true}), 0.0);
}

TEST(Auroc, AllTiedIsHalf) {
  const std::vector<double> s(6, 0.4);
  EXPECT_EQ(auroc(s, {true, false, true, false, false, true}), 0.5);
}

TEST(Auroc, MatchesPairCounting) {
  Rng rng(9);
  std::vector<double> s;
  std::vector<bool> pos;
  for (int i = 0; i < 20; ++i) {
    s.push_back(std::round(rng.uniform() * 8.0) / 8.0);  // coarse grid so ties occur
    pos.push_back(rng.uniform() < 0.5);
  }
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t j = 0; j < 20; ++j) {
      if (!pos[i] || pos[j]) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  EXPECT_NEAR(auroc(s, pos), wins / pairs, 1e-12);
}

TEST(Auroc, NeedsBothClasses) {
  const std::vector<double> s = {0.1, 0.2};
  EXPECT_THROW(auroc(s, {true, true}), std::invalid_argument);
}

TEST(Evaluate, ReportIsWithinRanges) {
  const auto dist = predictive_from_logits(random_logits(10, 5, 60, 3));
  std::vector<std::size_t> y;
  Rng rng(11);
  for (int i = 0; i < 60; ++i) y.push_back(rng.below(3));
  const auto r = evaluate(dist, y);
  EXPECT_EQ(r.samples, 60u);
  EXPECT_EQ(r.particles, 5u);
  for (double v : {r.accuracy, r.ece, r.mce, r.auroc}) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_GE(r.brier, 0.0);
  EXPECT_LE(r.brier, 2.0);
  EXPECT_GE(r.diversity, 0.0);
  EXPECT_EQ(r.mutual_information.size(), 60u);
  EXPECT_THROW(evaluate(dist, std::vector<std::size_t>(3, 0)), ShapeError);
}
