#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <vector>

#include "mfdv/data.hpp"
#include "mfdv/model.hpp"
#include "mfdv/optim.hpp"
#include "mfdv/stochastic.hpp"

namespace mfdv::nn {

enum class TickMode { PerEpoch, PerStep };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 50;
  double lr = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  LossConfig loss;
  TickMode tick = TickMode::PerEpoch;
  /// MC samples for the per-epoch test accuracy.
  std::size_t mc_samples = 15;
  std::size_t threads = 1;

  void validate() const;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;
  double loss = 0.0;           // mean total loss over the epoch's batches
  double cross_entropy = 0.0;  // mean CE
  double log_sigma = 0.0;      // sum_i ln(sigma_i + delta_i) at epoch end
  double mean_sigma = 0.0;     // at epoch end
  double test_accuracy = -1.0; // -1 when no test set was given
};

struct StepLog {
  std::size_t step = 0;  // 1-based optimizer step
  double loss = 0.0;
  double mean_sigma = 0.0;  // after the step
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::vector<StepLog> steps;
};

/// lr for 0-based `epoch`: x0.1 at 50% and again at 75% of training.
double scheduled_lr(double base, std::size_t epoch, std::size_t epochs);

/// Minibatch SGD+momentum on the MFDV loss. Shuffling and noise come from
/// streams derived from config.seed, so equal inputs give bitwise-equal weights.
TrainLog train(Model& model, const data::Dataset& train_set, const data::Dataset* test_set, const TrainConfig& config,
               const std::function<void(const EpochLog&)>& on_epoch = {});

}  // namespace mfdv::nn
