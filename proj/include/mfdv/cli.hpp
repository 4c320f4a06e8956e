#pragma once

// Run configuration and the command implementations behind tools/mfdv.
//
// A run directory holds config.txt, weights.bin, train_log.csv, steps.csv and
// reports/. Commands only ever add files to it.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mfdv/attacks.hpp"
#include "mfdv/data.hpp"
#include "mfdv/eval.hpp"
#include "mfdv/model.hpp"
#include "mfdv/report.hpp"
#include "mfdv/train.hpp"

namespace mfdv::cli {

struct RunConfig {
  // model.*
  std::string arch = "mini_cnn";  // mini_cnn | mlp
  std::size_t feature_dim = 128;
  std::size_t hidden = 256;  // mlp only
  bool stochastic = true;
  // mfdv.*
  LossConfig loss;
  double step_size = 0.01;
  nn::TickMode tick = nn::TickMode::PerEpoch;
  // train.*
  std::size_t epochs = 30;
  std::size_t batch = 50;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  // data.*
  std::string data = "auto";  // auto | cifar10 | cifar100 | synth
  std::size_t train_size = 2000;
  std::size_t test_size = 500;
  std::uint64_t data_seed = 0;
  // eval.*
  std::size_t mc_samples = 15;
  std::size_t threads = 1;
  std::vector<attacks::AttackConfig> attacks = {attacks::NullAttack{}, attacks::Fgsm{}, attacks::Pgd{}};
  // checklist.*
  eval::ChecklistOptions checklist;

  void validate() const;
};

/// Sorted "key=value" lines; parse_config(to_text(c)) reproduces c.
std::string to_text(const RunConfig& config);
/// Lines are "key=value"; blank lines and '#' comments are skipped. Keys not
/// present keep their defaults. Unknown keys and bad values throw ConfigError.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
/// Applies a single "key=value" override.
void set_value(RunConfig& config, const std::string& assignment);

struct LoadedData {
  data::Dataset train;
  data::Dataset test;
  std::string source;  // e.g. "cifar10:/data/cifar" or "surrogate:synth_images"
};

/// "auto" reads CIFAR-10 from $MFDV_DATA_DIR when set and falls back to the
/// synthetic CIFAR-shaped surrogate otherwise.
LoadedData load_data(const RunConfig& config);

nn::Architecture architecture(const RunConfig& config, const Shape& example_shape, std::size_t classes);

struct Paths {
  std::filesystem::path run_dir;
  std::filesystem::path config() const { return run_dir / "config.txt"; }
  std::filesystem::path weights() const { return run_dir / "weights.bin"; }
  std::filesystem::path train_log() const { return run_dir / "train_log.csv"; }
  std::filesystem::path steps_log() const { return run_dir / "steps.csv"; }
  std::filesystem::path reports() const { return run_dir / "reports"; }
};

/// Trains and writes config, weights and logs into a fresh (or empty) run dir.
void cmd_train(const RunConfig& config, const std::filesystem::path& run_dir, std::ostream& log);

/// Loads the run's model; eval.* / attack settings come from `config`.
eval::EvalReport cmd_attack(const RunConfig& config, const std::filesystem::path& run_dir,
                            const std::optional<std::filesystem::path>& out, std::ostream& log);

eval::EvalReport cmd_checklist(const RunConfig& config, const std::filesystem::path& run_dir,
                               const std::optional<std::filesystem::path>& out, std::ostream& log);

std::string cmd_diff(const std::filesystem::path& a, const std::filesystem::path& b);

/// MC prediction for test examples [first, first + count).
void cmd_predict(const RunConfig& config, const std::filesystem::path& run_dir, std::size_t first, std::size_t count,
                 std::ostream& out);

/// The run's persisted config with eval-time overrides applied on top.
RunConfig run_config(const std::filesystem::path& run_dir, const std::vector<std::string>& overrides = {});

nn::Model load_model(const RunConfig& config, const std::filesystem::path& run_dir, const LoadedData& data);

}  // namespace mfdv::cli
