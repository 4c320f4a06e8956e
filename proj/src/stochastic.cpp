#include "mfdv/stochastic.hpp"

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "mfdv/errors.hpp"

namespace mfdv {

double StochasticLayerState::mean_sigma() const {
  const auto s = sigma.data();
  return s.empty() ? 0.0 : std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

StochasticLayerState init_stochastic_state(std::size_t dim, double step_size, Rng& rng) {
  if (dim == 0) throw ShapeError("stochastic layer: feature dimension must be positive");
  if (!(step_size >= 0.0) || !std::isfinite(step_size)) throw ConfigError("mfdv.step_size", "must be finite and >= 0");
  std::uniform_real_distribution<double> uniform(1e-3, 1.0);
  Tensor sigma({dim});
  for (double& s : sigma.data()) s = uniform(rng);
  return {std::move(sigma), Tensor({dim}), step_size};
}

void delta_tick(StochasticLayerState& state) {
  for (double& d : state.delta.data()) d += state.step_size;
}

void LossConfig::validate() const {
  if (!std::isfinite(lambda1) || lambda1 < 0.0) throw ConfigError("mfdv.lambda1", "must be finite and >= 0");
  if (!std::isfinite(lambda2) || lambda2 < 0.0) throw ConfigError("mfdv.lambda2", "must be finite and >= 0");
}

NoisyFeature stochastic_forward(Graph& graph, NodeId h, NodeId sigma, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor eps(graph.value(h).shape());
  for (double& e : eps.data()) e = normal(rng);
  const NodeId noise = graph.constant(std::move(eps));
  return {graph.add(h, graph.mul(noise, sigma)), noise};
}

NodeId stochastic_forward(Graph& graph, NodeId h, NodeId sigma, const Tensor& noise) {
  if (noise.shape() != graph.value(h).shape()) {
    throw ShapeError("stochastic_forward: noise shape " + to_string(noise.shape()) + " vs feature shape " +
                     to_string(graph.value(h).shape()));
  }
  return graph.add(h, graph.mul(graph.constant(noise), sigma));
}

Tensor stochastic_forward(const Tensor& h, const StochasticLayerState& state, Rng& rng) {
  const std::size_t d = state.dim();
  if (h.rank() == 0 || h.shape().back() != d) {
    throw ShapeError("stochastic_forward: feature shape " + to_string(h.shape()) + " vs sigma [" + std::to_string(d) + "]");
  }
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor out = h;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += state.sigma[i % d] * normal(rng);
  return out;
}

MfdvLoss mfdv_loss(Graph& graph, NodeId logits, std::span<const int> labels, std::optional<NodeId> sigma,
                   const Tensor& delta, std::span<const NodeId> weights, const LossConfig& config) {
  config.validate();
  MfdvLoss loss{};
  loss.cross_entropy = graph.softmax_cross_entropy(logits, std::vector<int>(labels.begin(), labels.end()));
  loss.total = loss.cross_entropy;

  if (sigma) {
    const Tensor& s = graph.value(*sigma);
    if (delta.shape() != s.shape()) {
      throw ShapeError("mfdv_loss: delta " + to_string(delta.shape()) + " vs sigma " + to_string(s.shape()));
    }
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!(s[i] + delta[i] > 0.0)) {
        throw NumericError("mfdv_loss: sigma[" + std::to_string(i) + "] + delta[" + std::to_string(i) +
                           "] = " + std::to_string(s[i] + delta[i]) + " is not positive");
      }
    }
    loss.log_sigma = graph.sum(graph.log(graph.add(*sigma, graph.constant(delta))));
    loss.total = graph.sub(loss.total, graph.scale(*loss.log_sigma, config.lambda1));
  }

  if (!weights.empty()) {
    NodeId penalty = graph.sum(graph.mul(weights[0], weights[0]));
    for (std::size_t i = 1; i < weights.size(); ++i) {
      penalty = graph.add(penalty, graph.sum(graph.mul(weights[i], weights[i])));
    }
    loss.weight_penalty = penalty;
    loss.total = graph.add(loss.total, graph.scale(penalty, config.lambda2));
  }
  return loss;
}

}  // namespace mfdv
