// bella: batch front end for pretraining, adapter training, evaluation,
// attacks, weight soups and reports.
//
// Exit codes: 0 success, 1 invalid input or config, 2 runtime or numeric
// failure.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bella/checkpoint.hpp"
#include "bella/config.hpp"
#include "bella/pipeline.hpp"

namespace fs = std::filesystem;
using namespace bella;

namespace {

struct ConfigArgs {
  std::string path;
  std::vector<std::string> sets;
};

void add_config_args(CLI::App* cmd, ConfigArgs& a) {
  cmd->add_option("-c,--config", a.path, "Run config file (key = value with [sections])");
  cmd->add_option("--set", a.sets, "Override one key, e.g. --set train.gamma=0.05")
      ->type_name("SECTION.KEY=VALUE");
}

RunConfig resolve_config(const ConfigArgs& a) {
  RunConfig cfg = a.path.empty() ? RunConfig{} : load_config(a.path);
  std::vector<std::pair<std::string, std::string>> kv;
  for (const auto& s : a.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects SECTION.KEY=VALUE, got '" + s + "'");
    kv.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  apply_overrides(cfg, kv);
  cfg.validate();
  return cfg;
}

std::string stem_of(const std::string& path) {
  return fs::path(path).stem().string();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bella: SVGD over low-rank adapters of a frozen network"};
  app.require_subcommand(1);
  std::size_t workers = 1;
  app.add_option("-j,--workers", workers, "Worker threads (results do not depend on this)")
      ->check(CLI::PositiveNumber);

  ConfigArgs show_args, pre_args, train_args;

  auto* show = app.add_subcommand("config", "Print the resolved run config");
  add_config_args(show, show_args);

  auto* pre = app.add_subcommand("pretrain", "Train the base network on the source task");
  add_config_args(pre, pre_args);
  std::string pre_name = "base";
  pre->add_option("--name", pre_name, "Output checkpoint name (default: base)");

  auto* trn = app.add_subcommand("train", "Train adapter particles on the target task");
  add_config_args(trn, train_args);
  std::string base_path, train_name;
  trn->add_option("--base", base_path, "Base checkpoint (default: <output_dir>/base.ckpt)");
  trn->add_option("--name", train_name, "Output name (default: the train mode)");

  std::string eval_ckpt;
  auto* ev = app.add_subcommand("eval", "Metrics on the clean and shifted target test sets");
  ev->add_option("checkpoint", eval_ckpt, "Checkpoint to evaluate")->required()->check(CLI::ExistingFile);

  std::string attack_ckpt, budgets;
  auto* atk = app.add_subcommand("attack", "FGSM robust-accuracy sweep on the target test set");
  atk->add_option("checkpoint", attack_ckpt, "Checkpoint to attack")->required()->check(CLI::ExistingFile);
  atk->add_option("--budgets", budgets, "Comma separated L-inf budgets (default: from the checkpoint config)");

  std::string soup_ckpt, soup_name;
  auto* sp = app.add_subcommand("soup", "Average particle deltas into one merged model");
  sp->add_option("checkpoint", soup_ckpt, "Particle checkpoint")->required()->check(CLI::ExistingFile);
  sp->add_option("--name", soup_name, "Output name (default: <checkpoint>_soup)");

  std::string report_dir;
  auto* rep = app.add_subcommand("report", "Comparison table over every evaluated run in a directory");
  rep->add_option("dir", report_dir, "Run directory (default: $BELLA_OUTPUT_DIR or bella_runs)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*show) {
      std::cout << serialize_config(resolve_config(show_args));
    } else if (*pre) {
      const RunConfig cfg = resolve_config(pre_args);
      const Checkpoint ck = run_pretrain(cfg);
      const auto path = output_path(cfg, pre_name + ".ckpt");
      save_checkpoint(ck, path);
      std::cout << "pretrain: train_accuracy=" << ck.info["train_accuracy"].get<double>()
                << " final_loss=" << ck.info["final_loss"].get<double>() << "\n"
                << "wrote " << path << "\n";
    } else if (*trn) {
      const RunConfig cfg = resolve_config(train_args);
      const std::string bpath = base_path.empty() ? output_path(cfg, "base.ckpt") : base_path;
      const Checkpoint base = load_checkpoint(bpath);
      const std::string name = train_name.empty() ? to_string(cfg.train.mode) : train_name;
      std::string log;
      auto res = run_train(cfg, base, workers, [&](const EpochLog& e) {
        log += e.to_line() + "\n";
        std::cout << e.to_line() << "\n";
      });
      std::cout << "trainable parameters: " << res.params.bella << " (full-weight equivalent "
                << res.params.full << ", ratio " << res.params.ratio() << ")\n";
      const auto ckpt = output_path(cfg, name + ".ckpt");
      save_checkpoint(res.checkpoint, ckpt);
      write_file_atomic(output_path(cfg, name + ".train.log"), log);
      std::cout << "wrote " << ckpt << "\n";
    } else if (*ev) {
      const Checkpoint ck = load_checkpoint(eval_ckpt);
      const auto r = run_eval(ck, workers);
      const std::string name = stem_of(eval_ckpt);
      const auto json = output_path(ck.config, name + ".eval.json");
      write_file_atomic(json, eval_report_json(ck, r));
      write_file_atomic(output_path(ck.config, name + ".reliability.tsv"), reliability_tsv(r));
      write_file_atomic(output_path(ck.config, name + ".mi_hist.tsv"),
                        mi_histogram_tsv(ck, r, ck.config.mi_bins, workers));
      std::cout << "clean: accuracy=" << r.clean.accuracy << " ece=" << r.clean.ece
                << " mce=" << r.clean.mce << " brier=" << r.clean.brier
                << " diversity=" << r.clean.diversity << "\n"
                << "shifted: accuracy=" << r.shifted.accuracy
                << " median_mi_correct=" << r.shifted.median_mi_correct
                << " median_mi_incorrect=" << r.shifted.median_mi_incorrect << "\n"
                << "wrote " << json << "\n";
    } else if (*atk) {
      Checkpoint ck = load_checkpoint(attack_ckpt);
      if (!budgets.empty()) apply_overrides(ck.config, {{"attack.budgets", budgets}});
      ck.config.attack.validate();
      const auto pts = run_attack(ck, workers);
      const auto path = output_path(ck.config, stem_of(attack_ckpt) + ".attack.csv");
      const auto csv = attack_csv(pts);
      write_file_atomic(path, csv);
      std::cout << csv << "wrote " << path << "\n";
    } else if (*sp) {
      const Checkpoint ck = load_checkpoint(soup_ckpt);
      const Checkpoint soup = run_soup(ck);
      const std::string name = soup_name.empty() ? stem_of(soup_ckpt) + "_soup" : soup_name;
      const auto path = output_path(ck.config, name + ".ckpt");
      save_checkpoint(soup, path);
      std::cout << "soup of " << ck.particles.size() << " particles\nwrote " << path << "\n";
    } else if (*rep) {
      std::string dir = report_dir;
      if (dir.empty()) {
        const char* env = std::getenv("BELLA_OUTPUT_DIR");
        dir = env && *env ? env : RunConfig{}.output_dir;
      }
      const auto table = run_report(dir);
      write_file_atomic((fs::path(dir) / "report.tsv").string(), table);
      std::cout << table;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const CsvError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {  // includes ShapeError
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::out_of_range& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
