#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "bella/data.hpp"
#include "test_util.hpp"

using namespace bella;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
  TempDir() : path_(fs::temp_directory_path() / ("bella_data_test_" + std::to_string(::getpid()))) {
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }
  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(file(name)) << text;
    return file(name);
  }

private:
  fs::path path_;
};

std::size_t count_label(const Dataset& d, std::size_t k) {
  return static_cast<std::size_t>(std::count(d.labels.begin(), d.labels.end(), k));
}

}  // namespace

TEST(TwoMoons, NoiselessPointsLieOnArcs) {
  const Dataset d = gen_two_moons(200, 0.0, 1, false);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x = d.features(i, 0), y = d.features(i, 1);
    const double r = d.labels[i] == 0 ? std::hypot(x, y) : std::hypot(x - 1.0, y - 0.5);
    EXPECT_NEAR(r, 1.0, 1e-9);
    if (d.labels[i] == 0) EXPECT_GE(y, 0.0);
    else EXPECT_LE(y, 0.5);
  }
}

TEST(TwoMoons, BalancedAndDeterministic) {
  const Dataset a = gen_two_moons(300, 0.2, 7), b = gen_two_moons(300, 0.2, 7);
  EXPECT_EQ(count_label(a, 0), 150u);
  EXPECT_EQ(count_label(a, 1), 150u);
  EXPECT_TRUE(test::bit_equal(a.features, b.features));
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.provenance, b.provenance);
  EXPECT_FALSE(test::bit_equal(a.features, gen_two_moons(300, 0.2, 8).features));
  EXPECT_NO_THROW(a.validate());
}

TEST(TwoMoons, StandardizedByDefault) {
  const Dataset d = gen_two_moons(400, 0.1, 2);
  const auto s = Standardizer::fit(d.features);
  for (std::size_t j = 0; j < 2; ++j) {
    EXPECT_NEAR(s.mean[j], 0.0, 1e-12);
    EXPECT_NEAR(s.stddev[j], 1.0, 1e-12);
  }
}

TEST(TwoMoons, RejectsOddCount) {
  EXPECT_THROW(gen_two_moons(11, 0.1, 0), std::invalid_argument);
}

TEST(Blobs, CentersFollowCircleFormula) {
  const Dataset d = gen_blobs(4, 5, 0.0, 3);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(count_label(d, k), 5u);
    const double phi = 2.0 * std::numbers::pi * k / 4.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (d.labels[i] != k) continue;
      EXPECT_NEAR(d.features(i, 0), 3.0 * std::cos(phi), 1e-12);
      EXPECT_NEAR(d.features(i, 1), 3.0 * std::sin(phi), 1e-12);
    }
  }
}

TEST(Blobs, TightClustersAreNearestCenterSeparable) {
  const Dataset d = gen_blobs(5, 40, 1e-6, 4);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::size_t best = 0;
    double bd = 1e300;
    for (std::size_t k = 0; k < 5; ++k) {
      const double phi = 2.0 * std::numbers::pi * k / 5.0;
      const double dd = std::hypot(d.features(i, 0) - 3.0 * std::cos(phi), d.features(i, 1) - 3.0 * std::sin(phi));
      if (dd < bd) bd = dd, best = k;
    }
    ok += best == d.labels[i];
  }
  EXPECT_EQ(ok, d.size());
}

TEST(Rings, RadiusIsClassPlusOne) {
  const Dataset d = gen_rings(3, 30, 0.0, 5);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(count_label(d, k), 30u);
  for (std::size_t i = 0; i < d.size(); ++i)
    EXPECT_NEAR(std::hypot(d.features(i, 0), d.features(i, 1)), d.labels[i] + 1.0, 1e-12);
}

TEST(Corrupt, SeverityOutsideRangeRejected) {
  const Dataset d = gen_two_moons(20, 0.1, 1);
  EXPECT_THROW(corrupt(d, Corruption::gaussian_noise, 0, 1), std::invalid_argument);
  EXPECT_THROW(corrupt(d, Corruption::gaussian_noise, 6, 1), std::invalid_argument);
  EXPECT_THROW(parse_corruption("blur"), std::invalid_argument);
}

TEST(Corrupt, NoiseStdGrowsWithSeverity) {
  const Dataset d = gen_two_moons(2000, 0.1, 2);
  double prev = 0.0;
  for (int s = 1; s <= 5; ++s) {
    const Dataset c = corrupt(d, Corruption::gaussian_noise, s, 3);
    double sq = 0.0;
    for (std::size_t e = 0; e < d.features.size(); ++e) {
      const double delta = c.features.data()[e] - d.features.data()[e];
      sq += delta * delta;
    }
    const double sd = std::sqrt(sq / d.features.size());
    EXPECT_GT(sd, prev) << "severity " << s;
    prev = sd;
  }
}

TEST(Corrupt, KeepsLabelsAndSize) {
  const Dataset d = gen_blobs(3, 30, 0.5, 4);
  for (auto kind : {Corruption::gaussian_noise, Corruption::feature_dropout, Corruption::affine_shift})
    for (int s = 1; s <= 5; ++s) {
      const Dataset c = corrupt(d, kind, s, 9);
      EXPECT_EQ(c.labels, d.labels);
      EXPECT_EQ(c.size(), d.size());
      EXPECT_NE(c.provenance, d.provenance);
      EXPECT_TRUE(test::bit_equal(c.features, corrupt(d, kind, s, 9).features));
    }
}

TEST(Split, SizesAndDeterminism) {
  const Dataset d = gen_two_moons(100, 0.1, 5);
  const std::vector<double> f = {0.8, 0.2};
  const auto a = split(d, f, 6), b = split(d, f, 6);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_EQ(a[0].size(), 80u);
  EXPECT_EQ(a[1].size(), 20u);
  EXPECT_TRUE(test::bit_equal(a[0].features, b[0].features));
  EXPECT_EQ(a[1].labels, b[1].labels);
  const std::vector<double> bad = {0.5, 0.4};
  EXPECT_THROW(split(d, bad, 6), std::invalid_argument);
}

TEST(Standardizer, FittedOnTrainOnly) {
  const Dataset d = gen_two_moons(400, 0.2, 6, false);
  const std::vector<double> f = {0.5, 0.5};
  const auto parts = split(d, f, 7);
  const auto s = Standardizer::fit(parts[0].features);
  const auto test_stats = Standardizer::fit(s.apply(parts[1].features));
  EXPECT_GT(std::abs(test_stats.mean[0]) + std::abs(test_stats.mean[1]), 1e-6);
  EXPECT_THROW(s.apply(Matrix(2, 3)), ShapeError);
}

TEST(Csv, RoundTrip) {
  TempDir tmp;
  const Dataset d = gen_blobs(3, 10, 0.7, 8);
  save_csv(d, tmp.file("d.csv"));
  const Dataset back = load_csv(tmp.file("d.csv"));
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.num_classes, 3u);
  EXPECT_TRUE(test::bit_equal(back.features, d.features));
  EXPECT_FALSE(back.provenance.empty());
}

TEST(Csv, ErrorsCarryLineNumbers) {
  TempDir tmp;
  auto expect_error = [&](const std::string& name, const std::string& text, const std::string& needle) {
    try {
      load_csv(tmp.write(name, text));
      ADD_FAILURE() << name << ": no error";
    } catch (const CsvError& e) {
      EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
    }
  };
  expect_error("short.csv", "x0,x1,label\n1,2,0\n3,0\n", ":3:");
  expect_error("text.csv", "x0,x1,label\n1,2,0\n1,abc,1\n", ":3: column 'x1' value 'abc'");
  expect_error("label.csv", "x0,label\n1,0\n2,-1\n", ":3: label '-1'");
  expect_error("nolabel.csv", "x0,x1\n1,2\n", "no 'label' column");
  expect_error("empty.csv", "", "missing header");
  expect_error("rows.csv", "x0,label\n", "no data rows");
  EXPECT_THROW(load_csv(tmp.file("missing.csv")), CsvError);
}

TEST(Dataset, ValidateChecksInvariants) {
  Dataset d = gen_two_moons(10, 0.1, 1);
  d.labels[3] = 2;
  EXPECT_THROW(d.validate(), std::out_of_range);
  d = gen_two_moons(10, 0.1, 1);
  d.provenance.clear();
  EXPECT_THROW(d.validate(), std::invalid_argument);
  d = gen_two_moons(10, 0.1, 1);
  d.labels.pop_back();
  EXPECT_THROW(d.validate(), ShapeError);
}
