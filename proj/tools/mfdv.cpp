// mfdv: train, attack and audit stochastic-feature models.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mfdv/cli.hpp"
#include "mfdv/errors.hpp"

namespace {

namespace fs = std::filesystem;
using mfdv::cli::RunConfig;

struct Common {
  std::string config_file;
  std::string run_dir;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::optional<std::size_t> mc_samples;
};

void add_common(CLI::App* cmd, Common& c, bool needs_run_dir) {
  cmd->add_option("--config", c.config_file, "key=value config file");
  auto* rd = cmd->add_option("--run-dir", c.run_dir, "run directory");
  if (needs_run_dir) rd->required();
  cmd->add_option("--set", c.sets, "override one config key, e.g. --set train.lr=0.05");
  cmd->add_option("--seed", c.seed, "master seed (train.seed)");
  cmd->add_option("--threads", c.threads, "worker threads for evaluation");
  cmd->add_option("--mc-samples", c.mc_samples, "MC samples per prediction");
}

RunConfig resolve(const Common& c, RunConfig base) {
  if (!c.config_file.empty()) base = mfdv::cli::load_config(c.config_file, base);
  for (const auto& s : c.sets) mfdv::cli::set_value(base, s);
  if (c.seed) base.seed = *c.seed;
  if (c.threads) base.threads = *c.threads;
  if (c.mc_samples) base.mc_samples = *c.mc_samples;
  base.validate();
  return base;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stochastic-feature defense lab: training, attacks, obfuscation checklist"};
  app.require_subcommand(1);

  Common train_opts, attack_opts, check_opts, predict_opts;
  auto* train = app.add_subcommand("train", "train a model into a fresh run directory");
  add_common(train, train_opts, true);

  auto* attack = app.add_subcommand("attack", "robust accuracy of a trained run");
  add_common(attack, attack_opts, true);
  std::vector<std::string> attack_specs;
  std::string attack_out;
  attack->add_option("--attack", attack_specs, "attack spec, e.g. pgd:eps=8/255,alpha=0.8/255,k=10 (repeatable)");
  attack->add_option("--out", attack_out, "report path (default <run-dir>/reports/attack.json)");

  auto* checklist = app.add_subcommand("checklist", "gradient-obfuscation checklist");
  add_common(checklist, check_opts, true);
  std::optional<std::size_t> budget;
  std::string check_out;
  checklist->add_option("--budget", budget, "number of test examples");
  checklist->add_option("--out", check_out, "report path (default <run-dir>/reports/checklist.json)");

  auto* diff = app.add_subcommand("diff", "per-row accuracy deltas between two reports");
  std::string report_a, report_b;
  diff->add_option("first", report_a, "report JSON")->required();
  diff->add_option("second", report_b, "report JSON")->required();

  auto* predict = app.add_subcommand("predict", "MC predictions for test examples");
  add_common(predict, predict_opts, true);
  std::size_t index = 0, count = 1;
  predict->add_option("--index", index, "first test example");
  predict->add_option("--count", count, "number of examples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (train->parsed()) {
      mfdv::cli::cmd_train(resolve(train_opts, {}), train_opts.run_dir, std::cerr);
    } else if (attack->parsed()) {
      RunConfig c = resolve(attack_opts, mfdv::cli::run_config(attack_opts.run_dir));
      if (!attack_specs.empty()) {
        c.attacks.clear();
        for (const auto& s : attack_specs) c.attacks.push_back(mfdv::attacks::parse_attack(s));
      }
      const auto out = attack_out.empty() ? std::nullopt : std::optional<fs::path>(attack_out);
      mfdv::cli::cmd_attack(c, attack_opts.run_dir, out, std::cerr);
    } else if (checklist->parsed()) {
      RunConfig c = resolve(check_opts, mfdv::cli::run_config(check_opts.run_dir));
      if (budget) c.checklist.budget = *budget;
      const auto out = check_out.empty() ? std::nullopt : std::optional<fs::path>(check_out);
      const auto report = mfdv::cli::cmd_checklist(c, check_opts.run_dir, out, std::cerr);
      std::cout << mfdv::eval::format_checklist(report.checklist);
    } else if (diff->parsed()) {
      std::cout << mfdv::cli::cmd_diff(report_a, report_b);
    } else if (predict->parsed()) {
      const RunConfig c = resolve(predict_opts, mfdv::cli::run_config(predict_opts.run_dir));
      mfdv::cli::cmd_predict(c, predict_opts.run_dir, index, count, std::cout);
    }
  } catch (const mfdv::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
