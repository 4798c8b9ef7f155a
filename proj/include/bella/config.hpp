#pragma once

// Run configuration: a flat, sectioned key = value text format.
//
//   # comment
//   [train]
//   mode = svgd
//   gamma = 0.01
//
// Every key has a default. Serialization writes every key in a fixed order,
// so parse(serialize(c)) == c and a saved config reproduces its run.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "bella/data.hpp"
#include "bella/nn.hpp"
#include "bella/optim.hpp"
#include "bella/pretrain.hpp"
#include "bella/predict.hpp"
#include "bella/robustness.hpp"
#include "bella/svgd.hpp"

namespace bella {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class TaskKind { moons, blobs, rings, csv };

inline std::string to_string(TaskKind t) {
  switch (t) {
    case TaskKind::moons: return "moons";
    case TaskKind::blobs: return "blobs";
    case TaskKind::rings: return "rings";
    case TaskKind::csv: return "csv";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  if (s == "moons") return TaskKind::moons;
  if (s == "blobs") return TaskKind::blobs;
  if (s == "rings") return TaskKind::rings;
  if (s == "csv") return TaskKind::csv;
  throw std::invalid_argument("unknown task '" + std::string(s) +
                              "' (expected moons, blobs, rings or csv)");
}

// A synthetic task, or a pair of CSV files for kind = csv.
struct TaskSpec {
  TaskKind kind = TaskKind::moons;
  std::size_t samples = 1000;  // total; per class = samples / classes for blobs and rings
  std::size_t classes = 2;     // ignored by moons
  double noise = 0.2;          // moons noise std, blob/ring spread
  double rotation = 0.0;       // radians, about the data mean
  std::string csv_train;
  std::string csv_test;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "bella_runs";

  // Source task and base network.
  TaskSpec source{TaskKind::moons, 1000, 2, 0.2, 0.8, {}, {}};
  std::vector<std::size_t> hidden{128, 128};
  Activation activation = Activation::tanh;
  std::size_t pretrain_epochs = 60;
  std::size_t pretrain_batch_size = 64;
  double pretrain_learning_rate = 5e-3;
  Schedule pretrain_schedule = Schedule::cosine;
  double accuracy_gate = 0.95;

  // Target task.
  TaskSpec target;
  double train_fraction = 0.4;
  Corruption corruption = Corruption::gaussian_noise;
  int severity = 5;

  TrainConfig train;

  AggregationRule rule = AggregationRule::logit_mean;
  std::size_t calibration_bins = 15;
  std::size_t mi_bins = 20;

  AttackConfig attack;

  PretrainConfig pretrain_config() const {
    PretrainConfig p;
    p.hidden = hidden;
    p.activation = activation;
    p.epochs = pretrain_epochs;
    p.batch_size = pretrain_batch_size;
    p.learning_rate = pretrain_learning_rate;
    p.schedule = pretrain_schedule;
    p.seed = seed;
    return p;
  }

  // Adapter init and minibatch order follow the run seed.
  TrainConfig train_config() const {
    TrainConfig t = train;
    t.seed = seed;
    return t;
  }

  void validate() const;
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::string join_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + fmt_double(v[i]);
  return s;
}

inline std::string trim_copy(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim_copy(item));
  return out;
}

// Key table shared by the parser and the serializer.
struct Field {
  std::string key;  // "section.name"
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

inline double to_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError(key + ": '" + v + "' is not a number");
  return out;
}

inline std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError(key + ": '" + v + "' is not a non-negative integer");
  return out;
}

inline std::size_t to_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(to_u64(key, v));
}

template <class F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

inline void add_task_fields(std::vector<Field>& f, const std::string& sec, TaskSpec RunConfig::*m) {
  f.push_back({sec + ".task", [m](const RunConfig& c) { return to_string((c.*m).kind); },
               [m, sec](RunConfig& c, const std::string& v) {
                 (c.*m).kind = wrap(sec + ".task", [&] { return parse_task_kind(v); });
               }});
  f.push_back({sec + ".samples", [m](const RunConfig& c) { return std::to_string((c.*m).samples); },
               [m, sec](RunConfig& c, const std::string& v) { (c.*m).samples = to_size(sec + ".samples", v); }});
  f.push_back({sec + ".classes", [m](const RunConfig& c) { return std::to_string((c.*m).classes); },
               [m, sec](RunConfig& c, const std::string& v) { (c.*m).classes = to_size(sec + ".classes", v); }});
  f.push_back({sec + ".noise", [m](const RunConfig& c) { return fmt_double((c.*m).noise); },
               [m, sec](RunConfig& c, const std::string& v) { (c.*m).noise = to_double(sec + ".noise", v); }});
  f.push_back({sec + ".rotation", [m](const RunConfig& c) { return fmt_double((c.*m).rotation); },
               [m, sec](RunConfig& c, const std::string& v) { (c.*m).rotation = to_double(sec + ".rotation", v); }});
  f.push_back({sec + ".csv_train", [m](const RunConfig& c) { return (c.*m).csv_train; },
               [m](RunConfig& c, const std::string& v) { (c.*m).csv_train = v; }});
  f.push_back({sec + ".csv_test", [m](const RunConfig& c) { return (c.*m).csv_test; },
               [m](RunConfig& c, const std::string& v) { (c.*m).csv_test = v; }});
}

#define BELLA_SIZE(KEY, EXPR)                                                        \
  {KEY, [](const RunConfig& c) { return std::to_string(c.EXPR); },                   \
   [](RunConfig& c, const std::string& v) { c.EXPR = to_size(KEY, v); }}
#define BELLA_REAL(KEY, EXPR)                                                        \
  {KEY, [](const RunConfig& c) { return fmt_double(c.EXPR); },                       \
   [](RunConfig& c, const std::string& v) { c.EXPR = to_double(KEY, v); }}
#define BELLA_ENUM(KEY, EXPR, PARSE)                                                 \
  {KEY, [](const RunConfig& c) { return to_string(c.EXPR); },                        \
   [](RunConfig& c, const std::string& v) { c.EXPR = wrap(KEY, [&] { return PARSE(v); }); }}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f{
        {"run.seed", [](const RunConfig& c) { return std::to_string(c.seed); },
         [](RunConfig& c, const std::string& v) { c.seed = to_u64("run.seed", v); }},
        {"run.output_dir", [](const RunConfig& c) { return c.output_dir; },
         [](RunConfig& c, const std::string& v) { c.output_dir = v; }},
    };
    add_task_fields(f, "pretrain", &RunConfig::source);
    std::vector<Field> pre{
        {"pretrain.hidden", [](const RunConfig& c) { return join_sizes(c.hidden); },
         [](RunConfig& c, const std::string& v) {
           c.hidden.clear();
           if (v.empty()) return;
           for (const auto& s : split_list(v)) c.hidden.push_back(to_size("pretrain.hidden", s));
         }},
        BELLA_ENUM("pretrain.activation", activation, parse_activation),
        BELLA_SIZE("pretrain.epochs", pretrain_epochs),
        BELLA_SIZE("pretrain.batch_size", pretrain_batch_size),
        BELLA_REAL("pretrain.learning_rate", pretrain_learning_rate),
        BELLA_ENUM("pretrain.schedule", pretrain_schedule, parse_schedule),
        BELLA_REAL("pretrain.accuracy_gate", accuracy_gate),
    };
    f.insert(f.end(), pre.begin(), pre.end());
    add_task_fields(f, "data", &RunConfig::target);
    std::vector<Field> rest{
        BELLA_REAL("data.train_fraction", train_fraction),
        BELLA_ENUM("data.corruption", corruption, parse_corruption),
        {"data.severity", [](const RunConfig& c) { return std::to_string(c.severity); },
         [](RunConfig& c, const std::string& v) {
           c.severity = static_cast<int>(to_u64("data.severity", v));
         }},
        BELLA_ENUM("train.mode", train.mode, parse_train_mode),
        BELLA_SIZE("train.n_particles", train.n_particles),
        BELLA_SIZE("train.rank", train.rank),
        BELLA_REAL("train.gamma", train.gamma),
        BELLA_REAL("train.learning_rate", train.learning_rate),
        BELLA_REAL("train.prior_variance", train.prior_variance),
        BELLA_SIZE("train.epochs", train.epochs),
        BELLA_SIZE("train.batch_size", train.batch_size),
        {"train.layers", [](const RunConfig& c) { return c.train.layers; },
         [](RunConfig& c, const std::string& v) { c.train.layers = v; }},
        BELLA_ENUM("train.adapter", train.adapter, parse_adapter_kind),
        BELLA_REAL("train.init_scale", train.init_scale),
        BELLA_ENUM("train.schedule", train.schedule, parse_schedule),
        {"train.bandwidth",
         [](const RunConfig& c) {
           return c.train.kernel.mode == BandwidthMode::fixed ? std::string("fixed")
                                                              : std::string("median");
         },
         [](RunConfig& c, const std::string& v) {
           c.train.kernel.mode = wrap("train.bandwidth", [&] { return parse_bandwidth_mode(v); });
         }},
        BELLA_REAL("train.sigma_sq", train.kernel.sigma_sq),
        BELLA_ENUM("eval.rule", rule, parse_aggregation_rule),
        BELLA_SIZE("eval.calibration_bins", calibration_bins),
        BELLA_SIZE("eval.mi_bins", mi_bins),
        {"attack.budgets", [](const RunConfig& c) { return join_doubles(c.attack.budgets); },
         [](RunConfig& c, const std::string& v) {
           c.attack.budgets.clear();
           if (v.empty()) return;
           for (const auto& s : split_list(v))
             c.attack.budgets.push_back(to_double("attack.budgets", s));
         }},
        BELLA_REAL("attack.lower", attack.lower),
        BELLA_REAL("attack.upper", attack.upper),
        BELLA_ENUM("attack.rule", attack.rule, parse_aggregation_rule),
    };
    f.insert(f.end(), rest.begin(), rest.end());
    return f;
  }();
  return table;
}

#undef BELLA_SIZE
#undef BELLA_REAL
#undef BELLA_ENUM

inline void validate_task(const TaskSpec& t, const std::string& sec) {
  if (t.kind == TaskKind::csv) {
    if (t.csv_train.empty()) throw ConfigError(sec + ".csv_train: required when task = csv");
    return;
  }
  if (t.samples == 0) throw ConfigError(sec + ".samples: must be positive");
  if (!(t.noise >= 0.0)) throw ConfigError(sec + ".noise: must be non-negative");
  if (t.kind == TaskKind::moons && t.samples % 2 != 0)
    throw ConfigError(sec + ".samples: moons needs an even sample count");
  if (t.kind != TaskKind::moons) {
    if (t.classes < 2) throw ConfigError(sec + ".classes: need at least 2 classes");
    if (t.samples % t.classes != 0)
      throw ConfigError(sec + ".samples: must be a multiple of " + sec + ".classes");
  }
}

}  // namespace detail

inline void RunConfig::validate() const {
  detail::validate_task(source, "pretrain");
  detail::validate_task(target, "data");
  if (pretrain_epochs == 0) throw ConfigError("pretrain.epochs: must be positive");
  if (pretrain_batch_size == 0) throw ConfigError("pretrain.batch_size: must be positive");
  if (!(pretrain_learning_rate > 0.0)) throw ConfigError("pretrain.learning_rate: must be positive");
  for (std::size_t h : hidden)
    if (h == 0) throw ConfigError("pretrain.hidden: widths must be positive");
  if (!(accuracy_gate >= 0.0 && accuracy_gate <= 1.0))
    throw ConfigError("pretrain.accuracy_gate: must lie in [0, 1]");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("data.train_fraction: must lie in (0, 1)");
  if (severity < 1 || severity > 5) throw ConfigError("data.severity: must be 1..5");
  if (calibration_bins == 0) throw ConfigError("eval.calibration_bins: must be positive");
  if (mi_bins == 0) throw ConfigError("eval.mi_bins: must be positive");
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  try {
    attack.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("attack: ") + e.what());
  }
}

// Applies `key = value` pairs to `cfg`. Keys are "section.name". When the
// pairs set train.mode to ensemble or single without mentioning gamma (or,
// for single, n_particles) those fall back to 0 and 1.
inline void apply_overrides(RunConfig& cfg,
                            const std::vector<std::pair<std::string, std::string>>& kv) {
  std::set<std::string> seen;
  for (const auto& [key, value] : kv) {
    const auto& table = detail::fields();
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return f.key == key; });
    if (it == table.end()) throw ConfigError("unknown key '" + key + "'");
    it->set(cfg, value);
    seen.insert(key);
  }
  if (seen.count("train.mode")) {
    if (cfg.train.mode != TrainMode::svgd && !seen.count("train.gamma")) cfg.train.gamma = 0.0;
    if (cfg.train.mode == TrainMode::single && !seen.count("train.n_particles"))
      cfg.train.n_particles = 1;
  }
}

inline RunConfig parse_config(std::string_view text, const std::string& origin = "<config>") {
  std::vector<std::pair<std::string, std::string>> kv;
  std::set<std::string> keys;
  std::string section;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno);
    std::string line = detail::trim_copy(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + ": malformed section header");
      section = detail::trim_copy(std::string_view(line).substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError(where + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
    if (section.empty()) throw ConfigError(where + ": key outside any [section]");
    const std::string key = section + "." + detail::trim_copy(std::string_view(line).substr(0, eq));
    if (!keys.insert(key).second) throw ConfigError(where + ": duplicate key '" + key + "'");
    kv.emplace_back(key, detail::trim_copy(std::string_view(line).substr(eq + 1)));
    try {
      RunConfig scratch;
      apply_overrides(scratch, {kv.back()});
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    }
  }
  RunConfig cfg;
  apply_overrides(cfg, kv);
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

inline std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : detail::fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
      section = sec;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

}  // namespace bella
