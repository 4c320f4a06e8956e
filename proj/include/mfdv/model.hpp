#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "mfdv/autodiff.hpp"
#include "mfdv/random.hpp"
#include "mfdv/stochastic.hpp"
#include "mfdv/tensor.hpp"

namespace mfdv::nn {

struct Linear {
  std::size_t in = 0;
  std::size_t out = 0;
};
struct Conv {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;
};
struct MaxPool {};
struct Relu {};
struct Flatten {};
/// Adds sigma ⊙ eps to the incoming feature. Active in train and eval mode.
struct StochasticSlot {};

using LayerSpec = std::variant<Linear, Conv, MaxPool, Relu, Flatten, StochasticSlot>;

struct Architecture {
  std::string name;
  Shape input_shape;  // shape of one example
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;
};

/// input -> hidden -> relu -> D -> [stochastic] -> classes
Architecture mlp(std::size_t input_dim, std::size_t hidden, std::size_t feature_dim, std::size_t classes,
                 bool stochastic);
/// 2 x [conv3x3 + relu + maxpool] -> flatten -> linear D -> [stochastic] -> classes
Architecture mini_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t feature_dim,
                      std::size_t classes, bool stochastic, std::size_t width1 = 16, std::size_t width2 = 32);
/// A single linear layer, logits = x W + b. Handy for closed-form checks.
Architecture linear_classifier(std::size_t input_dim, std::size_t classes);

enum class Mode { Train, Eval };

enum class LossKind {
  CrossEntropy,
  /// C&W margin max(z_y - max_{j != y} z_j, -kappa) with kappa = 0.
  Margin,
};

struct TraceOptions {
  /// Noise draws per example. Values > 1 need a single (unbatched) input; the
  /// deterministic trunk runs once and the logits come back as [samples, K].
  std::size_t noise_samples = 1;
  bool param_grads = false;
  bool input_grad = false;
};

struct ForwardTrace {
  NodeId input = 0;
  NodeId logits = 0;
  std::optional<NodeId> features;  // pre-noise feature at the stochastic slot
  std::optional<NodeId> sigma;
  std::optional<NodeId> noise;
  std::vector<std::pair<std::string, NodeId>> params;  // registry order, sigma included
};

class Model {
 public:
  /// Kaiming-uniform (fan-in) weights, zero biases; sigma ~ U[1e-3, 1).
  Model(Architecture arch, Rng& init_rng, double step_size = 0.01);

  const Architecture& architecture() const noexcept { return arch_; }
  std::size_t num_classes() const noexcept { return arch_.num_classes; }
  /// Width of the penultimate feature (input width of the classifier layer).
  std::size_t feature_dim() const noexcept { return feature_dim_; }
  bool is_stochastic() const noexcept { return stochastic_.has_value(); }

  /// Trainable parameters in registry order; sigma is "stochastic.sigma".
  std::vector<std::string> parameter_names() const;
  /// Parameters subject to the L2 penalty (all layer weights and biases, not sigma).
  std::vector<std::string> weight_names() const;
  const Tensor& parameter(std::string_view name) const;
  /// Replaces a parameter; the shape must match.
  void set_parameter(std::string_view name, Tensor value);

  const StochasticLayerState* stochastic_state() const { return stochastic_ ? &*stochastic_ : nullptr; }
  StochasticLayerState* stochastic_state() { return stochastic_ ? &*stochastic_ : nullptr; }

  /// Records the forward pass of x ([input...] or [N, input...]) on `graph`.
  ForwardTrace trace(Graph& graph, const Tensor& x, Rng& rng, const TraceOptions& options = {}) const;

  /// Logits: [K] for one example, [N,K] for a batch. Noise is injected in both modes.
  Tensor forward(const Tensor& x, Mode mode, Rng& rng) const;

  /// Hex SHA-256 of every parameter and the delta buffer.
  std::string digest() const;

  /// Clamps sigma to at least kSigmaFloor.
  void enforce_invariants();

 private:
  struct Param {
    std::string name;
    Tensor value;
  };

  Param* find(std::string_view name);
  const Param* find(std::string_view name) const;

  Architecture arch_;
  std::vector<Param> params_;
  std::optional<StochasticLayerState> stochastic_;
  std::size_t feature_dim_ = 0;
};

/// Gradient of the loss w.r.t. the input, parameters held fixed. x has one
/// example's shape. `noise_samples` > 1 averages the loss (hence the gradient)
/// over that many noise draws while running the trunk once.
Tensor input_gradient(const Model& model, const Tensor& x, int label, LossKind loss, Rng& rng,
                      std::size_t noise_samples = 1);

/// Loss value for a single example at one noise draw.
double loss_value(const Model& model, const Tensor& x, int label, LossKind loss, Rng& rng);

}  // namespace mfdv::nn
