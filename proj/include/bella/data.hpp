#pragma once

// Synthetic benchmarks, corruptions, CSV I/O and deterministic splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "bella/linalg.hpp"
#include "bella/rng.hpp"

namespace bella {

struct Dataset {
  Matrix features;  // N x D
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return features.cols(); }

  void validate() const {
    if (features.rows() != labels.size())
      throw ShapeError("Dataset: " + std::to_string(features.rows()) + " feature rows but " +
                       std::to_string(labels.size()) + " labels");
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] >= num_classes)
        throw std::out_of_range("Dataset: label " + std::to_string(labels[i]) + " at row " +
                                std::to_string(i) + " outside [0, " + std::to_string(num_classes) +
                                ")");
    if (provenance.empty()) throw std::invalid_argument("Dataset: provenance must be set");
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out;
    out.features = gather_rows(features, idx);
    out.labels.reserve(idx.size());
    for (std::size_t i : idx) out.labels.push_back(labels[i]);
    out.num_classes = num_classes;
    out.provenance = provenance;
    return out;
  }
};

namespace detail {

inline std::string fmt_param(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace detail

// Per-feature affine normalization. Zero-variance features keep unit scale.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const Matrix& x) {
    Standardizer s;
    const std::size_t n = x.rows(), d = x.cols();
    if (n == 0) throw std::invalid_argument("Standardizer::fit: empty data");
    s.mean.assign(d, 0.0);
    s.stddev.assign(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) s.mean[j] += x(i, j);
    for (double& m : s.mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = x(i, j) - s.mean[j];
        s.stddev[j] += c * c;
      }
    for (double& v : s.stddev) {
      v = std::sqrt(v / static_cast<double>(n));
      if (!(v > 1e-12)) v = 1.0;
    }
    return s;
  }

  Matrix apply(const Matrix& x) const {
    if (x.cols() != mean.size())
      throw ShapeError("Standardizer: data has " + std::to_string(x.cols()) +
                       " features, fitted on " + std::to_string(mean.size()));
    Matrix out = x;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) = (out(i, j) - mean[j]) / stddev[j];
    return out;
  }

  Dataset apply(const Dataset& d) const {
    Dataset out = d;
    out.features = apply(d.features);
    return out;
  }
};

// Two interleaved half circles: class 0 on (cos t, sin t), class 1 on
// (1 - cos t, 0.5 - sin t), t ~ U(0, pi), plus isotropic N(0, noise^2).
inline Dataset gen_two_moons(std::size_t n, double noise_std, std::uint64_t seed,
                             bool standardize = true) {
  if (n == 0 || n % 2 != 0) throw std::invalid_argument("gen_two_moons: n must be even and positive");
  if (!(noise_std >= 0.0)) throw std::invalid_argument("gen_two_moons: negative noise");
  Rng rng = Rng(seed).split("two_moons");
  Rng angles = rng.split(0);
  Rng noise = rng.split(1);
  Dataset ds;
  ds.features = Matrix(n, 2);
  ds.labels.resize(n);
  ds.num_classes = 2;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i < n / 2 ? 0 : 1;
    const double t = std::numbers::pi * angles.uniform();
    double x = cls == 0 ? std::cos(t) : 1.0 - std::cos(t);
    double y = cls == 0 ? std::sin(t) : 0.5 - std::sin(t);
    if (noise_std > 0.0) {
      x += noise.normal(0.0, noise_std);
      y += noise.normal(0.0, noise_std);
    }
    ds.features(i, 0) = x;
    ds.features(i, 1) = y;
    ds.labels[i] = cls;
  }
  if (standardize) ds.features = Standardizer::fit(ds.features).apply(ds.features);
  ds.provenance = "two_moons(n=" + std::to_string(n) + ",noise=" + detail::fmt_param(noise_std) +
                  ",seed=" + std::to_string(seed) + (standardize ? "" : ",raw") + ")";
  return ds;
}

// Class k is N(c_k, spread^2 I) with c_k = radius (cos 2 pi k / K, sin 2 pi k / K).
inline Dataset gen_blobs(std::size_t num_classes, std::size_t n_per_class, double spread,
                         std::uint64_t seed, double radius = 3.0) {
  if (num_classes < 2) throw std::invalid_argument("gen_blobs: need at least 2 classes");
  if (!(spread >= 0.0)) throw std::invalid_argument("gen_blobs: negative spread");
  Rng rng = Rng(seed).split("blobs");
  Dataset ds;
  ds.features = Matrix(num_classes * n_per_class, 2);
  ds.num_classes = num_classes;
  for (std::size_t k = 0; k < num_classes; ++k) {
    const double phi = 2.0 * std::numbers::pi * static_cast<double>(k) / num_classes;
    const double cx = radius * std::cos(phi), cy = radius * std::sin(phi);
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const std::size_t row = k * n_per_class + i;
      ds.features(row, 0) = cx + rng.normal(0.0, spread);
      ds.features(row, 1) = cy + rng.normal(0.0, spread);
      ds.labels.push_back(k);
    }
  }
  ds.provenance = "blobs(classes=" + std::to_string(num_classes) + ",per_class=" +
                  std::to_string(n_per_class) + ",spread=" + detail::fmt_param(spread) +
                  ",seed=" + std::to_string(seed) + ")";
  return ds;
}

// Class k sits on the circle of radius k + 1 with radial noise N(0, spread^2).
inline Dataset gen_rings(std::size_t num_classes, std::size_t n_per_class, double spread,
                         std::uint64_t seed) {
  if (num_classes < 2) throw std::invalid_argument("gen_rings: need at least 2 classes");
  if (!(spread >= 0.0)) throw std::invalid_argument("gen_rings: negative spread");
  Rng rng = Rng(seed).split("rings");
  Dataset ds;
  ds.features = Matrix(num_classes * n_per_class, 2);
  ds.num_classes = num_classes;
  for (std::size_t k = 0; k < num_classes; ++k) {
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const std::size_t row = k * n_per_class + i;
      const double a = 2.0 * std::numbers::pi * rng.uniform();
      const double r = static_cast<double>(k + 1) + rng.normal(0.0, spread);
      ds.features(row, 0) = r * std::cos(a);
      ds.features(row, 1) = r * std::sin(a);
      ds.labels.push_back(k);
    }
  }
  ds.provenance = "rings(classes=" + std::to_string(num_classes) + ",per_class=" +
                  std::to_string(n_per_class) + ",spread=" + detail::fmt_param(spread) +
                  ",seed=" + std::to_string(seed) + ")";
  return ds;
}

// Rotates the first two features about their mean by `radians`.
inline Dataset rotate(const Dataset& ds, double radians) {
  if (ds.dim() < 2) throw ShapeError("rotate: need at least two features");
  Dataset out = ds;
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    mx += ds.features(i, 0);
    my += ds.features(i, 1);
  }
  mx /= static_cast<double>(ds.size());
  my /= static_cast<double>(ds.size());
  const double c = std::cos(radians), s = std::sin(radians);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double x = ds.features(i, 0) - mx, y = ds.features(i, 1) - my;
    out.features(i, 0) = mx + c * x - s * y;
    out.features(i, 1) = my + s * x + c * y;
  }
  out.provenance = ds.provenance + "|rotate(" + detail::fmt_param(radians) + ")";
  return out;
}

enum class Corruption { gaussian_noise, feature_dropout, affine_shift };

inline std::string to_string(Corruption c) {
  switch (c) {
    case Corruption::gaussian_noise: return "gaussian_noise";
    case Corruption::feature_dropout: return "feature_dropout";
    case Corruption::affine_shift: return "affine_shift";
  }
  return "?";
}

inline Corruption parse_corruption(std::string_view s) {
  if (s == "gaussian_noise") return Corruption::gaussian_noise;
  if (s == "feature_dropout") return Corruption::feature_dropout;
  if (s == "affine_shift") return Corruption::affine_shift;
  throw std::invalid_argument("unknown corruption '" + std::string(s) +
                              "' (expected gaussian_noise, feature_dropout or affine_shift)");
}

// Per-severity magnitudes, index 0 is severity 1:
//   gaussian_noise   additive N(0, (c * feature_std)^2), c in {0.05, 0.1, 0.2, 0.4, 0.8}
//   feature_dropout  each entry reset to its feature mean with p in {0.1, 0.2, 0.3, 0.4, 0.5}
//   affine_shift     rotate the first two features by {10, 20, 30, 45, 60} degrees and
//                    translate every feature by {0.1, 0.2, 0.3, 0.4, 0.5} * feature_std
inline constexpr double kNoiseLevels[5] = {0.05, 0.1, 0.2, 0.4, 0.8};
inline constexpr double kDropoutLevels[5] = {0.1, 0.2, 0.3, 0.4, 0.5};
inline constexpr double kRotationDegrees[5] = {10.0, 20.0, 30.0, 45.0, 60.0};
inline constexpr double kShiftLevels[5] = {0.1, 0.2, 0.3, 0.4, 0.5};

inline Dataset corrupt(const Dataset& ds, Corruption kind, int severity, std::uint64_t seed) {
  if (severity < 1 || severity > 5)
    throw std::invalid_argument("corrupt: severity " + std::to_string(severity) +
                                " outside 1..5");
  const auto stats = Standardizer::fit(ds.features);
  const std::size_t s = static_cast<std::size_t>(severity - 1);
  Rng rng = Rng(seed).split("corrupt").split(static_cast<std::uint64_t>(kind));
  Dataset out = ds;
  switch (kind) {
    case Corruption::gaussian_noise:
      for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t j = 0; j < out.dim(); ++j)
          out.features(i, j) += rng.normal(0.0, kNoiseLevels[s] * stats.stddev[j]);
      break;
    case Corruption::feature_dropout:
      for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t j = 0; j < out.dim(); ++j)
          if (rng.uniform() < kDropoutLevels[s]) out.features(i, j) = stats.mean[j];
      break;
    case Corruption::affine_shift: {
      if (out.dim() >= 2) out = rotate(out, kRotationDegrees[s] * std::numbers::pi / 180.0);
      for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t j = 0; j < out.dim(); ++j)
          out.features(i, j) += kShiftLevels[s] * stats.stddev[j];
      break;
    }
  }
  out.provenance = ds.provenance + "|corrupt(" + to_string(kind) + "," +
                   std::to_string(severity) + ",seed=" + std::to_string(seed) + ")";
  return out;
}

// Splits a shuffled copy into consecutive parts. Part k ends at
// round(N * (f_0 + ... + f_k)); the fractions must sum to 1.
inline std::vector<Dataset> split(const Dataset& ds, std::span<const double> fractions,
                                  std::uint64_t seed) {
  if (fractions.empty()) throw std::invalid_argument("split: no fractions");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw std::invalid_argument("split: negative fraction");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split: fractions must sum to 1");
  Rng rng = Rng(seed).split("split");
  const auto perm = permutation(rng, ds.size());
  std::vector<Dataset> out;
  double cum = 0.0;
  std::size_t start = 0;
  for (std::size_t k = 0; k < fractions.size(); ++k) {
    cum += fractions[k];
    const std::size_t end =
        k + 1 == fractions.size()
            ? ds.size()
            : std::min(ds.size(), static_cast<std::size_t>(std::llround(cum * ds.size())));
    out.push_back(ds.subset(std::span(perm).subspan(start, end - start)));
    start = end;
  }
  return out;
}

inline void save_csv(const Dataset& ds, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_csv: cannot open " + path);
  for (std::size_t j = 0; j < ds.dim(); ++j) os << "x" << j << ",";
  os << "label\n";
  os << std::setprecision(17);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (std::size_t j = 0; j < ds.dim(); ++j) os << ds.features(i, j) << ",";
    os << ds.labels[i] << "\n";
  }
  if (!os) throw std::runtime_error("save_csv: write failed for " + path);
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

class CsvError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Comma separated, header row required, integer labels in the "label" column.
// The class count is max(label) + 1.
inline Dataset load_csv(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CsvError("load_csv: cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw CsvError(path + ":1: missing header row");
  const auto header = detail::split_csv_line(line);
  std::size_t label_col = header.size();
  for (std::size_t j = 0; j < header.size(); ++j)
    if (detail::trim(header[j]) == "label") label_col = j;
  if (label_col == header.size()) throw CsvError(path + ":1: header has no 'label' column");
  if (header.size() < 2) throw CsvError(path + ":1: no feature columns");

  std::vector<double> values;
  std::vector<std::size_t> labels;
  std::uint64_t digest = 0xCBF29CE484222325ULL;
  for (char c : line) digest = (digest ^ static_cast<unsigned char>(c)) * 0x100000001B3ULL;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    for (char c : line) digest = (digest ^ static_cast<unsigned char>(c)) * 0x100000001B3ULL;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw CsvError(path + ":" + std::to_string(line_no) + ": expected " +
                     std::to_string(header.size()) + " cells, found " +
                     std::to_string(cells.size()));
    for (std::size_t j = 0; j < cells.size(); ++j) {
      const std::string cell = detail::trim(cells[j]);
      std::size_t pos = 0;
      if (j == label_col) {
        long long v = -1;
        try {
          v = std::stoll(cell, &pos);
        } catch (const std::exception&) {
          pos = 0;
        }
        if (pos == 0 || pos != cell.size() || v < 0)
          throw CsvError(path + ":" + std::to_string(line_no) + ": label '" + cell +
                         "' is not a non-negative integer");
        labels.push_back(static_cast<std::size_t>(v));
      } else {
        double v = 0.0;
        try {
          v = std::stod(cell, &pos);
        } catch (const std::exception&) {
          pos = 0;
        }
        if (pos == 0 || pos != cell.size() || !std::isfinite(v))
          throw CsvError(path + ":" + std::to_string(line_no) + ": column '" +
                         detail::trim(header[j]) + "' value '" + cell + "' is not numeric");
        values.push_back(v);
      }
    }
  }
  if (labels.empty()) throw CsvError(path + ": no data rows");
  Dataset ds;
  ds.features = Matrix(labels.size(), header.size() - 1, std::move(values));
  ds.labels = std::move(labels);
  ds.num_classes = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  std::ostringstream hex;
  hex << std::hex << std::setw(16) << std::setfill('0') << digest;
  ds.provenance = "csv(path=" + path + ",fnv1a64=" + hex.str() + ")";
  return ds;
}

}  // namespace bella
