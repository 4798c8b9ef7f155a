#pragma once

// Checkpoint container.
//
//   bella-checkpoint v1\n
//   manifest_bytes <N>\n
//   <N bytes of JSON manifest>\n
//   <payload: little-endian f64 tensors in manifest order>
//
// The manifest lists every tensor (name, shape, dtype, byte offset, byte
// length) together with the model topology, particle layout, run config and
// data provenance, so a checkpoint can be used without its config file.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bella/config.hpp"
#include "bella/data.hpp"
#include "bella/lowrank.hpp"
#include "bella/nn.hpp"
#include "bella/optim.hpp"
#include "bella/svgd.hpp"

namespace bella {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class CheckpointKind { base, particles, soup };

inline std::string to_string(CheckpointKind k) {
  switch (k) {
    case CheckpointKind::base: return "base";
    case CheckpointKind::particles: return "particles";
    case CheckpointKind::soup: return "soup";
  }
  return "?";
}

inline CheckpointKind parse_checkpoint_kind(std::string_view s) {
  if (s == "base") return CheckpointKind::base;
  if (s == "particles") return CheckpointKind::particles;
  if (s == "soup") return CheckpointKind::soup;
  throw CheckpointError("unknown checkpoint kind '" + std::string(s) + "'");
}

// `base` holds the frozen network (for soups, the merged one). Particle
// checkpoints add adapters and Adam moments for every particle.
struct Checkpoint {
  CheckpointKind kind = CheckpointKind::base;
  RunConfig config;
  MlpModel base;
  std::vector<Particle> particles;
  LayerMask mask;
  std::optional<Standardizer> standardizer;
  std::string source_provenance;
  std::string target_provenance;
  nlohmann::json info = nlohmann::json::object();

  std::size_t rank() const { return config.train.rank; }

  // Base-only checkpoints evaluate as one particle without adapters.
  ParticleSet particle_set() const {
    ParticleSet set;
    set.base = std::make_shared<const MlpModel>(base);
    if (kind == CheckpointKind::particles) {
      set.particles = particles;
      set.mask = mask;
    } else {
      set.particles.push_back(Particle{AdapterStack(base.layers.size()), {}});
      set.mask = LayerMask(base.layers.size(), false);
    }
    return set;
  }
};

inline constexpr const char* kCheckpointMagic = "bella-checkpoint v1";

namespace detail {

struct TensorRef {
  std::string name;
  const Matrix* data;
};

inline void put_f64(std::string& out, double v) {
  const auto u = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
}

inline double get_f64(const char* p) {
  std::uint64_t u = 0;
  for (int b = 0; b < 8; ++b) u |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  return std::bit_cast<double>(u);
}

inline nlohmann::json topology_json(const MlpModel& m) {
  auto arr = nlohmann::json::array();
  for (const auto& l : m.topology())
    arr.push_back({{"in", l.in_dim}, {"out", l.out_dim}, {"activation", to_string(l.activation)}});
  return arr;
}

// Shapes of a particle's adapter stack implied by the manifest.
inline AdapterStack empty_stack(const MlpModel& base, const LayerMask& mask, AdapterKind kind,
                                std::size_t rank) {
  AdapterStack s(base.layers.size());
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (!mask[k]) continue;
    const std::size_t d1 = base.layers[k].weight.rows(), d2 = base.layers[k].weight.cols();
    if (kind == AdapterKind::low_rank)
      s[k] = LowRankAdapter{Matrix(d1, rank), Matrix(rank, d2)};
    else
      s[k] = DenseDelta{Matrix(d1, d2)};
  }
  return s;
}

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& ck) {
  using nlohmann::json;
  std::vector<Matrix> biases;
  biases.reserve(ck.base.layers.size());
  for (const auto& l : ck.base.layers) biases.emplace_back(1, l.bias.size(), l.bias);

  std::vector<detail::TensorRef> tensors;
  for (std::size_t k = 0; k < ck.base.layers.size(); ++k) {
    tensors.push_back({"base.layer" + std::to_string(k) + ".weight", &ck.base.layers[k].weight});
    tensors.push_back({"base.layer" + std::to_string(k) + ".bias", &biases[k]});
  }
  json steps = json::array();
  if (ck.kind == CheckpointKind::particles) {
    for (std::size_t i = 0; i < ck.particles.size(); ++i) {
      const auto& p = ck.particles[i];
      const std::string pre = "particle" + std::to_string(i) + ".";
      const auto names = parameter_names(p.adapters);
      const auto params = parameters(p.adapters);
      if (p.optimizer.first_moment.size() != params.size() ||
          p.optimizer.second_moment.size() != params.size())
        throw CheckpointError("checkpoint: particle " + std::to_string(i) +
                              " optimizer state does not match its adapters");
      for (std::size_t t = 0; t < params.size(); ++t) tensors.push_back({pre + names[t], params[t]});
      for (std::size_t t = 0; t < params.size(); ++t)
        tensors.push_back({pre + "adam_m." + names[t], &p.optimizer.first_moment[t]});
      for (std::size_t t = 0; t < params.size(); ++t)
        tensors.push_back({pre + "adam_v." + names[t], &p.optimizer.second_moment[t]});
      steps.push_back(p.optimizer.step);
    }
  }

  json list = json::array();
  std::string payload;
  for (const auto& t : tensors) {
    const std::size_t bytes = t.data->size() * 8;
    list.push_back({{"name", t.name},
                    {"shape", {t.data->rows(), t.data->cols()}},
                    {"dtype", "f64"},
                    {"offset", payload.size()},
                    {"bytes", bytes}});
    for (double v : t.data->data()) detail::put_f64(payload, v);
  }

  json m;
  m["format"] = "bella-checkpoint";
  m["version"] = 1;
  m["kind"] = to_string(ck.kind);
  m["topology"] = detail::topology_json(ck.base);
  m["n"] = ck.kind == CheckpointKind::particles ? ck.particles.size() : 1;
  m["r"] = ck.config.train.rank;
  m["gamma"] = ck.config.train.gamma;
  m["seed"] = ck.config.seed;
  m["mode"] = to_string(ck.config.train.mode);
  m["adapter"] = to_string(ck.config.train.adapter);
  json mask = json::array();
  for (bool b : ck.mask) mask.push_back(b);
  m["mask"] = mask;
  m["adam_steps"] = steps;
  m["provenance"] = {{"source", ck.source_provenance}, {"target", ck.target_provenance}};
  m["config"] = serialize_config(ck.config);
  if (ck.standardizer)
    m["standardizer"] = {{"mean", ck.standardizer->mean}, {"stddev", ck.standardizer->stddev}};
  else
    m["standardizer"] = nullptr;
  m["info"] = ck.info;
  m["tensors"] = list;
  m["payload_bytes"] = payload.size();

  const std::string manifest = m.dump(2);
  std::string out = std::string(kCheckpointMagic) + "\nmanifest_bytes " +
                    std::to_string(manifest.size()) + "\n" + manifest + "\n";
  out += payload;
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "<checkpoint>") {
  using nlohmann::json;
  auto fail = [&](const std::string& msg) { return CheckpointError(origin + ": " + msg); };
  const std::string magic = std::string(kCheckpointMagic) + "\n";
  if (bytes.compare(0, magic.size(), magic) != 0) throw fail("not a bella checkpoint (bad header)");
  std::size_t pos = magic.size();
  const std::string tag = "manifest_bytes ";
  if (bytes.compare(pos, tag.size(), tag) != 0) throw fail("missing manifest_bytes line");
  pos += tag.size();
  const auto eol = bytes.find('\n', pos);
  if (eol == std::string::npos) throw fail("truncated header");
  std::size_t mbytes = 0;
  try {
    mbytes = std::stoull(bytes.substr(pos, eol - pos));
  } catch (const std::exception&) {
    throw fail("bad manifest_bytes value");
  }
  pos = eol + 1;
  if (bytes.size() < pos + mbytes + 1) throw fail("truncated manifest");
  json m;
  try {
    m = json::parse(bytes.substr(pos, mbytes));
  } catch (const json::exception& e) {
    throw fail(std::string("manifest is not valid JSON: ") + e.what());
  }
  pos += mbytes + 1;
  const char* payload = bytes.data() + pos;
  const std::size_t payload_size = bytes.size() - pos;

  Checkpoint ck;
  try {
    if (m.at("format") != "bella-checkpoint" || m.at("version") != 1)
      throw fail("unsupported checkpoint format/version");
    if (m.at("payload_bytes").get<std::size_t>() != payload_size)
      throw fail("payload is " + std::to_string(payload_size) + " bytes, manifest says " +
                 std::to_string(m.at("payload_bytes").get<std::size_t>()));
    ck.kind = parse_checkpoint_kind(m.at("kind").get<std::string>());
    ck.config = parse_config(m.at("config").get<std::string>(), origin + " (embedded config)");
    ck.source_provenance = m.at("provenance").at("source").get<std::string>();
    ck.target_provenance = m.at("provenance").at("target").get<std::string>();
    if (!m.at("standardizer").is_null())
      ck.standardizer = Standardizer{m["standardizer"].at("mean").get<std::vector<double>>(),
                                     m["standardizer"].at("stddev").get<std::vector<double>>()};
    ck.info = m.at("info");
    for (const auto& b : m.at("mask")) ck.mask.push_back(b.get<bool>());

    // Every tensor must tile the payload exactly, in order.
    std::map<std::string, Matrix> tensors;
    std::vector<std::string> order;
    std::size_t expect = 0;
    for (const auto& t : m.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      const auto shape = t.at("shape").get<std::vector<std::size_t>>();
      const auto off = t.at("offset").get<std::size_t>();
      const auto len = t.at("bytes").get<std::size_t>();
      if (t.at("dtype") != "f64") throw fail("tensor " + name + ": unsupported dtype");
      if (shape.size() != 2 || shape[0] * shape[1] * 8 != len)
        throw fail("tensor " + name + ": shape does not match byte length");
      if (off != expect) throw fail("tensor " + name + ": offset " + std::to_string(off) +
                                    " but previous tensor ends at " + std::to_string(expect));
      if (off + len > payload_size) throw fail("tensor " + name + ": runs past end of payload");
      std::vector<double> v(shape[0] * shape[1]);
      for (std::size_t e = 0; e < v.size(); ++e) v[e] = detail::get_f64(payload + off + 8 * e);
      if (!tensors.emplace(name, Matrix(shape[0], shape[1], std::move(v))).second)
        throw fail("duplicate tensor " + name);
      order.push_back(name);
      expect = off + len;
    }
    if (expect != payload_size) throw fail("payload has trailing bytes");

    std::size_t used = 0;
    auto take = [&](const std::string& name, std::size_t rows, std::size_t cols) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw fail("missing tensor " + name);
      if (it->second.rows() != rows || it->second.cols() != cols)
        throw fail("tensor " + name + " has shape " + it->second.shape() + ", expected " +
                   Matrix::shape_string(rows, cols));
      ++used;
      return it->second;
    };

    for (const auto& l : m.at("topology")) {
      DenseLayer layer;
      const auto k = std::to_string(ck.base.layers.size());
      const auto in = l.at("in").get<std::size_t>(), out = l.at("out").get<std::size_t>();
      layer.weight = take("base.layer" + k + ".weight", out, in);
      const Matrix b = take("base.layer" + k + ".bias", 1, out);
      layer.bias.assign(b.data().begin(), b.data().end());
      layer.activation = parse_activation(l.at("activation").get<std::string>());
      ck.base.layers.push_back(std::move(layer));
    }
    ck.base.validate();
    if (ck.kind == CheckpointKind::particles) {
      if (ck.mask.size() != ck.base.layers.size()) throw fail("mask length does not match topology");
      const auto n = m.at("n").get<std::size_t>();
      const auto steps = m.at("adam_steps").get<std::vector<std::uint64_t>>();
      if (steps.size() != n) throw fail("adam_steps has the wrong length");
      const auto kind = parse_adapter_kind(m.at("adapter").get<std::string>());
      for (std::size_t i = 0; i < n; ++i) {
        Particle p;
        p.adapters = detail::empty_stack(ck.base, ck.mask, kind, m.at("r").get<std::size_t>());
        const std::string pre = "particle" + std::to_string(i) + ".";
        const auto names = parameter_names(p.adapters);
        auto params = parameters(p.adapters);
        for (std::size_t t = 0; t < params.size(); ++t)
          *params[t] = take(pre + names[t], params[t]->rows(), params[t]->cols());
        for (std::size_t t = 0; t < params.size(); ++t)
          p.optimizer.first_moment.push_back(
              take(pre + "adam_m." + names[t], params[t]->rows(), params[t]->cols()));
        for (std::size_t t = 0; t < params.size(); ++t)
          p.optimizer.second_moment.push_back(
              take(pre + "adam_v." + names[t], params[t]->rows(), params[t]->cols()));
        p.optimizer.step = steps[i];
        ck.particles.push_back(std::move(p));
      }
    }
    if (used != tensors.size()) throw fail("manifest lists tensors that the layout does not use");
  } catch (const json::exception& e) {
    throw fail(std::string("malformed manifest: ") + e.what());
  } catch (const ConfigError& e) {
    throw fail(e.what());
  }
  return ck;
}

// Writes to a temporary sibling and renames it into place.
inline void write_file_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, target);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  write_file_atomic(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(read_file(path), path);
}

}  // namespace bella
