#include "mfdv/train.hpp"

#include <cmath>
#include <numeric>

#include "mfdv/errors.hpp"
#include "mfdv/inference.hpp"

namespace mfdv::nn {

void TrainConfig::validate() const {
  if (epochs == 0) throw ConfigError("train.epochs", "must be >= 1");
  if (batch_size == 0) throw ConfigError("train.batch", "must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train.lr", "must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum", "must be in [0,1)");
  if (mc_samples == 0) throw ConfigError("eval.mc_samples", "must be >= 1");
  loss.validate();
}

double scheduled_lr(double base, std::size_t epoch, std::size_t epochs) {
  double lr = base;
  if (2 * epoch >= epochs) lr *= 0.1;
  if (4 * epoch >= 3 * epochs) lr *= 0.1;
  return lr;
}

TrainLog train(Model& model, const data::Dataset& train_set, const data::Dataset* test_set, const TrainConfig& config,
               const std::function<void(const EpochLog&)>& on_epoch) {
  config.validate();
  if (train_set.size() == 0) throw std::invalid_argument("train: empty training set");
  Rng shuffle_rng(derive_seed(config.seed, 0, 0x51));
  Rng noise_rng(derive_seed(config.seed, 0, 0x52));
  OptimState opt{config.lr, config.momentum, {}};
  const auto weight_names = model.weight_names();

  TrainLog log;
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    opt.lr = scheduled_lr(config.lr, epoch, config.epochs);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0, ce_sum = 0.0;
    std::size_t batches = 0;

    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const std::span<const std::size_t> idx(order.data() + begin, end - begin);
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (std::size_t i : idx) labels.push_back(train_set.label(i));

      Graph graph;
      const ForwardTrace t = model.trace(graph, train_set.batch(idx), noise_rng, {.param_grads = true});
      std::vector<NodeId> weights;
      for (const auto& [name, id] : t.params) {
        if (std::find(weight_names.begin(), weight_names.end(), name) != weight_names.end()) weights.push_back(id);
      }
      const StochasticLayerState* state = model.stochastic_state();
      const MfdvLoss loss =
          mfdv_loss(graph, t.logits, labels, t.sigma, state ? state->delta : Tensor({0}), weights, config.loss);
      const Gradients grads = graph.backward(loss.total);

      GradMap grad_map;
      for (const auto& [name, id] : t.params) grad_map.emplace(name, grads[id]);
      sgd_step(model, grad_map, opt);
      if (config.tick == TickMode::PerStep && model.stochastic_state()) delta_tick(*model.stochastic_state());

      ++step;
      loss_sum += graph.value(loss.total).item();
      ce_sum += graph.value(loss.cross_entropy).item();
      ++batches;
      log.steps.push_back({step, graph.value(loss.total).item(), state ? model.stochastic_state()->mean_sigma() : 0.0});
    }
    if (config.tick == TickMode::PerEpoch && model.stochastic_state()) delta_tick(*model.stochastic_state());

    EpochLog e;
    e.epoch = epoch + 1;
    e.lr = opt.lr;
    e.loss = loss_sum / static_cast<double>(batches);
    e.cross_entropy = ce_sum / static_cast<double>(batches);
    if (const auto* s = model.stochastic_state()) {
      e.mean_sigma = s->mean_sigma();
      for (std::size_t i = 0; i < s->dim(); ++i) e.log_sigma += std::log(s->sigma[i] + s->delta[i]);
    }
    if (test_set) {
      e.test_accuracy = eval::clean_accuracy(model, *test_set,
                                             {.mc_samples = config.mc_samples, .seed = config.seed, .threads = config.threads});
    }
    log.epochs.push_back(e);
    if (on_epoch) on_epoch(e);
  }
  return log;
}

}  // namespace mfdv::nn
