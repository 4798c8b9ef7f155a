#pragma once

// Command implementations behind the CLI: pretrain, train, eval, attack, soup
// and report. Each command is a pure function of its inputs; file outputs are
// written atomically.
//
// Seeds: the source task uses seed + 1000, the target task, its split and its
// corruption use seed, and base init / adapters / minibatches take named
// streams of Rng(seed).

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bella/checkpoint.hpp"
#include "bella/config.hpp"
#include "bella/data.hpp"
#include "bella/lowrank.hpp"
#include "bella/metrics.hpp"
#include "bella/predict.hpp"
#include "bella/pretrain.hpp"
#include "bella/robustness.hpp"
#include "bella/svgd.hpp"

namespace bella {

inline std::string output_dir(const RunConfig& cfg) {
  if (const char* env = std::getenv("BELLA_OUTPUT_DIR"); env && *env) return env;
  return cfg.output_dir;
}

inline std::string output_path(const RunConfig& cfg, const std::string& file) {
  return (std::filesystem::path(output_dir(cfg)) / file).string();
}

// ---- data ----

inline Dataset generate_task(const TaskSpec& t, std::uint64_t seed) {
  Dataset ds;
  switch (t.kind) {
    case TaskKind::moons: ds = gen_two_moons(t.samples, t.noise, seed); break;
    case TaskKind::blobs: ds = gen_blobs(t.classes, t.samples / t.classes, t.noise, seed); break;
    case TaskKind::rings: ds = gen_rings(t.classes, t.samples / t.classes, t.noise, seed); break;
    case TaskKind::csv: ds = load_csv(t.csv_train); break;
  }
  if (t.rotation != 0.0) ds = rotate(ds, t.rotation);
  return ds;
}

// Source data, standardized with its own statistics.
inline Dataset source_data(const RunConfig& cfg) {
  Dataset ds = generate_task(cfg.source, cfg.seed + 1000);
  return Standardizer::fit(ds.features).apply(ds);
}

struct TargetData {
  Dataset train;
  Dataset test;
  Dataset shifted;  // corrupted copy of test
  Standardizer standardizer;
};

// Train/test split of the target task. Both halves are standardized with
// train statistics (or `fixed`, when given); the shifted set is the
// standardized test set under the configured corruption.
inline TargetData target_data(const RunConfig& cfg, const Standardizer* fixed = nullptr) {
  Dataset train, test;
  if (cfg.target.kind == TaskKind::csv && !cfg.target.csv_test.empty()) {
    train = generate_task(cfg.target, cfg.seed);
    test = load_csv(cfg.target.csv_test);
    if (cfg.target.rotation != 0.0) test = rotate(test, cfg.target.rotation);
  } else {
    const Dataset all = generate_task(cfg.target, cfg.seed);
    const double fr[2] = {cfg.train_fraction, 1.0 - cfg.train_fraction};
    auto parts = split(all, fr, cfg.seed);
    train = std::move(parts[0]);
    test = std::move(parts[1]);
  }
  if (train.size() == 0 || test.size() == 0)
    throw ConfigError("data: train/test split leaves an empty side");
  TargetData td;
  td.standardizer = fixed ? *fixed : Standardizer::fit(train.features);
  td.train = td.standardizer.apply(train);
  td.test = td.standardizer.apply(test);
  td.test.num_classes = td.train.num_classes = std::max(train.num_classes, test.num_classes);
  td.shifted = corrupt(td.test, cfg.corruption, cfg.severity, cfg.seed);
  return td;
}

// ---- pretrain ----

class GateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline Checkpoint run_pretrain(const RunConfig& cfg) {
  cfg.validate();
  const Dataset src = source_data(cfg);
  const auto res = pretrain(src, cfg.pretrain_config());
  if (res.train_accuracy < cfg.accuracy_gate) {
    std::ostringstream os;
    os << "pretrain: train accuracy " << res.train_accuracy << " is below the gate "
       << cfg.accuracy_gate;
    throw GateError(os.str());
  }
  Checkpoint ck;
  ck.kind = CheckpointKind::base;
  ck.config = cfg;
  ck.base = res.model;
  ck.mask.assign(res.model.layers.size(), false);
  ck.source_provenance = src.provenance;
  ck.info = nlohmann::json{{"train_accuracy", res.train_accuracy}, {"final_loss", res.final_loss}};
  return ck;
}

// ---- train ----

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochLog> log;
  ParamCount params;
};

inline TrainResult run_train(const RunConfig& cfg, const Checkpoint& base, std::size_t workers = 1,
                             const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  if (base.kind == CheckpointKind::particles)
    throw ConfigError("train: expected a base (or soup) checkpoint, got a particle checkpoint");
  const TargetData td = target_data(cfg);
  if (base.base.input_dim() != td.train.dim())
    throw ShapeError("train: base takes " + std::to_string(base.base.input_dim()) +
                     " inputs, target data has " + std::to_string(td.train.dim()) + " features");
  if (base.base.output_dim() != td.train.num_classes)
    throw ShapeError("train: base predicts " + std::to_string(base.base.output_dim()) +
                     " classes, target data has " + std::to_string(td.train.num_classes));
  auto model = std::make_shared<const MlpModel>(base.base);
  const TrainConfig tc = cfg.train_config();
  ParticleSet set = make_particle_set(model, tc);
  TrainOptions opts;
  opts.workers = workers;
  opts.on_epoch = on_epoch;
  TrainResult out;
  out.log = train(set, td.train, tc, opts);
  const auto topo = model->topology();
  out.params = param_count(topo, set.mask, cfg.train.rank, set.size());
  if (cfg.train.adapter == AdapterKind::dense) out.params.bella = out.params.full;

  Checkpoint& ck = out.checkpoint;
  ck.kind = CheckpointKind::particles;
  ck.config = cfg;
  ck.base = base.base;
  ck.particles = std::move(set.particles);
  ck.mask = set.mask;
  ck.standardizer = td.standardizer;
  ck.source_provenance = base.source_provenance;
  ck.target_provenance = td.train.provenance;
  const auto& last = out.log.back();
  ck.info = {{"final_loss", last.loss},
             {"final_train_accuracy", last.accuracy},
             {"trainable_parameters", out.params.bella},
             {"full_parameters", out.params.full}};
  return out;
}

// ---- eval ----

struct EvalResult {
  MetricsReport clean;
  MetricsReport shifted;
};

inline TargetData checkpoint_target(const Checkpoint& ck) {
  return target_data(ck.config, ck.standardizer ? &*ck.standardizer : nullptr);
}

inline EvalResult run_eval(const Checkpoint& ck, std::size_t workers = 1) {
  const TargetData td = checkpoint_target(ck);
  const ParticleSet set = ck.particle_set();
  MetricsOptions opts{ck.config.rule, ck.config.calibration_bins};
  EvalResult r;
  r.clean = evaluate(posterior_predictive(set, td.test.features, workers), td.test.labels, opts);
  r.shifted =
      evaluate(posterior_predictive(set, td.shifted.features, workers), td.shifted.labels, opts);
  return r;
}

namespace detail {

inline nlohmann::json num(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline nlohmann::json report_json(const MetricsReport& m) {
  return {{"samples", m.samples},
          {"particles", m.particles},
          {"rule", m.rule},
          {"accuracy", num(m.accuracy)},
          {"mean_entropy", num(m.mean_entropy)},
          {"mean_entropy_correct", num(m.mean_entropy_correct)},
          {"mean_entropy_incorrect", num(m.mean_entropy_incorrect)},
          {"mean_mi", num(m.mean_mi)},
          {"median_mi_correct", num(m.median_mi_correct)},
          {"median_mi_incorrect", num(m.median_mi_incorrect)},
          {"diversity", num(m.diversity)},
          {"ece", num(m.ece)},
          {"mce", num(m.mce)},
          {"brier", num(m.brier)},
          {"auroc", num(m.auroc)}};
}

}  // namespace detail

inline std::string eval_report_json(const Checkpoint& ck, const EvalResult& r) {
  nlohmann::json j;
  j["kind"] = to_string(ck.kind);
  j["mode"] = ck.kind == CheckpointKind::particles ? to_string(ck.config.train.mode)
                                                   : to_string(ck.kind);
  j["n"] = ck.kind == CheckpointKind::particles ? ck.particles.size() : 1;
  j["rank"] = ck.config.train.rank;
  j["gamma"] = ck.config.train.gamma;
  j["seed"] = ck.config.seed;
  j["clean"] = detail::report_json(r.clean);
  j["shifted"] = detail::report_json(r.shifted);
  j["shifted"]["corruption"] = to_string(ck.config.corruption);
  j["shifted"]["severity"] = ck.config.severity;
  return j.dump(2) + "\n";
}

inline std::string reliability_tsv(const EvalResult& r) {
  std::string s = "split\tbin_lower\tbin_upper\tcount\tmean_confidence\taccuracy\n";
  for (const auto* m : {&r.clean, &r.shifted})
    for (const auto& b : m->bins)
      s += std::string(m == &r.clean ? "clean" : "shifted") + "\t" + detail::fmt_double(b.lower) +
           "\t" + detail::fmt_double(b.upper) + "\t" + std::to_string(b.count) + "\t" +
           detail::fmt_double(b.mean_confidence) + "\t" + detail::fmt_double(b.accuracy) + "\n";
  return s;
}

// Equal-width MI histogram over [0, ln K], split by correctness under `rule`.
inline std::string mi_histogram_tsv(const Checkpoint& ck, const EvalResult& r, std::size_t bins,
                                    std::size_t workers = 1) {
  const TargetData td = checkpoint_target(ck);
  const ParticleSet set = ck.particle_set();
  std::string s = "split\tbin_lower\tbin_upper\tcorrect\tincorrect\n";
  const double hi = std::log(static_cast<double>(ck.base.output_dim()));
  for (int which = 0; which < 2; ++which) {
    const Dataset& ds = which == 0 ? td.test : td.shifted;
    const MetricsReport& m = which == 0 ? r.clean : r.shifted;
    const auto pred = classify(posterior_predictive(set, ds.features, workers), ck.config.rule);
    std::vector<std::size_t> ok(bins, 0), bad(bins, 0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      auto b = static_cast<std::size_t>(m.mutual_information[i] / hi * static_cast<double>(bins));
      b = std::min(b, bins - 1);
      (pred[i] == ds.labels[i] ? ok : bad)[b] += 1;
    }
    for (std::size_t b = 0; b < bins; ++b)
      s += std::string(which == 0 ? "clean" : "shifted") + "\t" +
           detail::fmt_double(hi * static_cast<double>(b) / static_cast<double>(bins)) + "\t" +
           detail::fmt_double(hi * static_cast<double>(b + 1) / static_cast<double>(bins)) + "\t" +
           std::to_string(ok[b]) + "\t" + std::to_string(bad[b]) + "\n";
  }
  return s;
}

// ---- attack ----

inline std::vector<RobustnessPoint> run_attack(const Checkpoint& ck, std::size_t workers = 1) {
  const TargetData td = checkpoint_target(ck);
  return robust_accuracy_sweep(ck.particle_set(), td.test, ck.config.attack, workers);
}

inline std::string attack_csv(const std::vector<RobustnessPoint>& pts) {
  std::string s = "epsilon,accuracy\n";
  for (const auto& p : pts) s += detail::fmt_double(p.epsilon) + "," + detail::fmt_double(p.accuracy) + "\n";
  return s;
}

// ---- soup ----

inline Checkpoint run_soup(const Checkpoint& ck) {
  if (ck.kind != CheckpointKind::particles)
    throw ConfigError("soup: expected a particle checkpoint, got " + to_string(ck.kind));
  std::vector<AdapterStack> stacks;
  for (const auto& p : ck.particles) stacks.push_back(p.adapters);
  const auto topo = ck.base.topology();
  const auto deltas = soup_average(stacks, topo);
  Checkpoint out;
  out.kind = CheckpointKind::soup;
  out.config = ck.config;
  out.base = merge_soup(ck.base, deltas);
  out.mask.assign(ck.base.layers.size(), false);
  out.standardizer = ck.standardizer;
  out.source_provenance = ck.source_provenance;
  out.target_provenance = ck.target_provenance;
  out.info = {{"soup_of", ck.particles.size()}, {"mode", to_string(ck.config.train.mode)}};
  return out;
}

// ---- report ----

// One row per <name>.eval.json in `dir` (sorted by name), joined with
// <name>.attack.csv when present.
inline std::string run_report(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw ConfigError("report: '" + dir + "' is not a directory");
  std::vector<std::string> names;
  const std::string suffix = ".eval.json";
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto f = e.path().filename().string();
    if (f.size() > suffix.size() && f.compare(f.size() - suffix.size(), suffix.size(), suffix) == 0)
      names.push_back(f.substr(0, f.size() - suffix.size()));
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw ConfigError("report: no *.eval.json files in '" + dir + "'");

  auto cell = [](const nlohmann::json& v) {
    if (v.is_null()) return std::string("nan");
    if (v.is_number_float()) {
      std::ostringstream os;
      os << std::setprecision(6) << v.get<double>();
      return os.str();
    }
    return v.dump();
  };
  std::string out =
      "name\tmode\tn\taccuracy\tshifted_accuracy\tece\tmce\tbrier\tauroc\tdiversity\t"
      "shifted_mi_correct\tshifted_mi_incorrect\trobust_accuracy\n";
  for (const auto& name : names) {
    const auto j = nlohmann::json::parse(read_file((fs::path(dir) / (name + suffix)).string()));
    std::string robust = "-";
    const auto attack = fs::path(dir) / (name + ".attack.csv");
    if (fs::exists(attack)) {
      std::istringstream in(read_file(attack.string()));
      std::string line, last;
      while (std::getline(in, line))
        if (!line.empty()) last = line;
      const auto comma = last.find(',');
      if (comma != std::string::npos && last != "epsilon,accuracy") {
        std::ostringstream os;
        os << std::fixed << std::setprecision(4) << std::stod(last.substr(comma + 1)) << "@"
           << last.substr(0, comma);
        robust = os.str();
      }
    }
    const auto& c = j.at("clean");
    const auto& s = j.at("shifted");
    out += name + "\t" + j.at("mode").get<std::string>() + "\t" + j.at("n").dump() + "\t" +
           cell(c.at("accuracy")) + "\t" + cell(s.at("accuracy")) + "\t" + cell(c.at("ece")) +
           "\t" + cell(c.at("mce")) + "\t" + cell(c.at("brier")) + "\t" + cell(c.at("auroc")) +
           "\t" + cell(c.at("diversity")) + "\t" + cell(s.at("median_mi_correct")) + "\t" +
           cell(s.at("median_mi_incorrect")) + "\t" + robust + "\n";
  }
  return out;
}

}  // namespace bella
