#pragma once

// Stochastic feature layer and the variance-maximizing training loss.
//
// The layer keeps the deterministic feature h and adds zero-mean Gaussian
// noise with a learnable per-dimension standard deviation sigma:
//
//     out = h + sigma ⊙ eps,   eps ~ N(0, I)
//
// Training minimizes
//
//     L = CE - lambda1 * sum_i ln(sigma_i + delta_i) + lambda2 * sum w^2
//
// so d L / d sigma_i from the log term is exactly -lambda1 / (sigma_i + delta_i).
// delta is a non-learnable offset that grows by `step_size` on every tick.

#include <cstddef>
#include <optional>
#include <span>

#include "mfdv/autodiff.hpp"
#include "mfdv/random.hpp"
#include "mfdv/tensor.hpp"

namespace mfdv {

/// sigma is clamped to at least this value after every optimizer step.
inline constexpr double kSigmaFloor = 1e-6;

struct StochasticLayerState {
  Tensor sigma;  // [D], strictly positive, learnable
  Tensor delta;  // [D], non-negative, non-decreasing
  double step_size = 0.01;

  std::size_t dim() const noexcept { return sigma.size(); }
  double mean_sigma() const;
};

/// sigma_i ~ Uniform[1e-3, 1), delta = 0.
StochasticLayerState init_stochastic_state(std::size_t dim, double step_size, Rng& rng);

/// delta_i += step_size for every dimension.
void delta_tick(StochasticLayerState& state);

struct LossConfig {
  double lambda1 = 0.25;  // desk-scale ablation over {0.01, 0.1, 0.25, 0.5}
  double lambda2 = 5e-4;

  void validate() const;
};

struct NoisyFeature {
  NodeId output;
  NodeId noise;  // the constant eps leaf that was sampled
};

/// Records h + sigma ⊙ eps with a fresh eps drawn from `rng`. h is [D] or [N,D];
/// sigma is a [D] node, broadcast across rows.
NoisyFeature stochastic_forward(Graph& graph, NodeId h, NodeId sigma, Rng& rng);

/// Same as above with caller-supplied (frozen) noise of h's shape.
NodeId stochastic_forward(Graph& graph, NodeId h, NodeId sigma, const Tensor& noise);

/// Value-only variant.
Tensor stochastic_forward(const Tensor& h, const StochasticLayerState& state, Rng& rng);

struct MfdvLoss {
  NodeId total;
  NodeId cross_entropy;
  std::optional<NodeId> log_sigma;  // sum_i ln(sigma_i + delta_i), before scaling by lambda1
  std::optional<NodeId> weight_penalty;  // sum w^2, before scaling by lambda2
};

/// Builds the training loss. `sigma` is absent for models without a stochastic slot.
/// Throws NumericError if any sigma_i + delta_i <= 0.
MfdvLoss mfdv_loss(Graph& graph, NodeId logits, std::span<const int> labels, std::optional<NodeId> sigma,
                   const Tensor& delta, std::span<const NodeId> weights, const LossConfig& config);

}  // namespace mfdv
