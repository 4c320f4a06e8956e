#include "mfdv/model.hpp"

#include <algorithm>
#include <cmath>

#include "mfdv/digest.hpp"
#include "mfdv/errors.hpp"

namespace mfdv::nn {
namespace {

constexpr std::string_view kSigmaName = "stochastic.sigma";

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string param_name(std::size_t layer, std::string_view what) {
  return "layer" + std::to_string(layer) + "." + std::string(what);
}

Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng);
  return t;
}

}  // namespace

Architecture mlp(std::size_t input_dim, std::size_t hidden, std::size_t feature_dim, std::size_t classes,
                 bool stochastic) {
  Architecture a{stochastic ? "mlp-mfdv" : "mlp", {input_dim}, {}, classes};
  a.layers = {Linear{input_dim, hidden}, Relu{}, Linear{hidden, feature_dim}};
  if (stochastic) a.layers.emplace_back(StochasticSlot{});
  a.layers.emplace_back(Linear{feature_dim, classes});
  return a;
}

Architecture mini_cnn(std::size_t channels, std::size_t height, std::size_t width, std::size_t feature_dim,
                      std::size_t classes, bool stochastic, std::size_t width1, std::size_t width2) {
  Architecture a{stochastic ? "cnn-mfdv" : "cnn", {channels, height, width}, {}, classes};
  a.layers = {Conv{channels, width1, 1}, Relu{}, MaxPool{}, Conv{width1, width2, 1}, Relu{}, MaxPool{}, Flatten{},
              Linear{width2 * (height / 4) * (width / 4), feature_dim}};
  if (stochastic) a.layers.emplace_back(StochasticSlot{});
  a.layers.emplace_back(Linear{feature_dim, classes});
  return a;
}

Architecture linear_classifier(std::size_t input_dim, std::size_t classes) {
  return Architecture{"linear", {input_dim}, {Linear{input_dim, classes}}, classes};
}

Model::Model(Architecture arch, Rng& init_rng, double step_size) : arch_(std::move(arch)) {
  Shape cur = arch_.input_shape;
  bool seen_slot = false;
  auto fail = [&](std::size_t i, const std::string& why) {
    throw ShapeError("model '" + arch_.name + "' layer " + std::to_string(i) + ": " + why + " (input " +
                     mfdv::to_string(cur) + ")");
  };
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    std::visit(Overloaded{
                   [&](const Linear& l) {
                     if (cur != Shape{l.in}) fail(i, "linear expects [" + std::to_string(l.in) + "]");
                     params_.push_back({param_name(i, "weight"), kaiming_uniform({l.in, l.out}, l.in, init_rng)});
                     params_.push_back({param_name(i, "bias"), Tensor({l.out})});
                     feature_dim_ = l.in;
                     cur = {l.out};
                   },
                   [&](const Conv& c) {
                     if (cur.size() != 3 || cur[0] != c.in_channels) fail(i, "conv channel mismatch");
                     if (c.stride != 1 && c.stride != 2) fail(i, "conv stride must be 1 or 2");
                     params_.push_back({param_name(i, "weight"),
                                        kaiming_uniform({c.out_channels, c.in_channels, 3, 3}, c.in_channels * 9, init_rng)});
                     params_.push_back({param_name(i, "bias"), Tensor({c.out_channels})});
                     cur = {c.out_channels, (cur[1] - 1) / c.stride + 1, (cur[2] - 1) / c.stride + 1};
                   },
                   [&](const MaxPool&) {
                     if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2) fail(i, "maxpool needs [C,H,W] with H,W >= 2");
                     cur = {cur[0], cur[1] / 2, cur[2] / 2};
                   },
                   [&](const Relu&) {},
                   [&](const Flatten&) { cur = {numel(cur)}; },
                   [&](const StochasticSlot&) {
                     if (seen_slot) fail(i, "only one stochastic slot is supported");
                     if (cur.size() != 1) fail(i, "stochastic slot needs a flat feature");
                     seen_slot = true;
                     stochastic_ = init_stochastic_state(cur[0], step_size, init_rng);
                   },
               },
               arch_.layers[i]);
  }
  if (cur != Shape{arch_.num_classes}) {
    throw ShapeError("model '" + arch_.name + "': output " + mfdv::to_string(cur) + " does not match " +
                     std::to_string(arch_.num_classes) + " classes");
  }
  if (stochastic_ && stochastic_->dim() != feature_dim_) {
    throw ShapeError("model '" + arch_.name + "': stochastic slot must feed the classifier layer directly");
  }
}

std::vector<std::string> Model::parameter_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0, p = 0; i < arch_.layers.size(); ++i) {
    if (std::holds_alternative<StochasticSlot>(arch_.layers[i])) {
      names.emplace_back(kSigmaName);
    } else if (std::holds_alternative<Linear>(arch_.layers[i]) || std::holds_alternative<Conv>(arch_.layers[i])) {
      names.push_back(params_[p++].name);
      names.push_back(params_[p++].name);
    }
  }
  return names;
}

std::vector<std::string> Model::weight_names() const {
  std::vector<std::string> names;
  for (const auto& p : params_) names.push_back(p.name);
  return names;
}

Model::Param* Model::find(std::string_view name) {
  auto it = std::find_if(params_.begin(), params_.end(), [&](const Param& p) { return p.name == name; });
  return it == params_.end() ? nullptr : &*it;
}

const Model::Param* Model::find(std::string_view name) const { return const_cast<Model*>(this)->find(name); }

const Tensor& Model::parameter(std::string_view name) const {
  if (name == kSigmaName && stochastic_) return stochastic_->sigma;
  if (const Param* p = find(name)) return p->value;
  throw std::out_of_range("model: no parameter named '" + std::string(name) + "'");
}

void Model::set_parameter(std::string_view name, Tensor value) {
  Tensor* slot = nullptr;
  if (name == kSigmaName && stochastic_) {
    slot = &stochastic_->sigma;
  } else if (Param* p = find(name)) {
    slot = &p->value;
  }
  if (!slot) throw std::out_of_range("model: no parameter named '" + std::string(name) + "'");
  if (slot->shape() != value.shape()) {
    throw ShapeError("model: parameter '" + std::string(name) + "' has shape " + mfdv::to_string(slot->shape()) +
                     ", got " + mfdv::to_string(value.shape()));
  }
  *slot = std::move(value);
}

void Model::enforce_invariants() {
  if (!stochastic_) return;
  for (double& s : stochastic_->sigma.data()) s = std::max(s, kSigmaFloor);
}

std::string Model::digest() const {
  Sha256 sha;
  for (const auto& name : parameter_names()) {
    sha.update(name);
    sha.update(parameter(name).data());
  }
  if (stochastic_) sha.update(stochastic_->delta.data());
  return sha.hex();
}

ForwardTrace Model::trace(Graph& graph, const Tensor& x, Rng& rng, const TraceOptions& options) const {
  const Shape& in = arch_.input_shape;
  const bool single = x.shape() == in;
  const bool batched = x.rank() == in.size() + 1 && std::equal(in.begin(), in.end(), x.shape().begin() + 1);
  if (!single && !batched) {
    throw ShapeError("forward: input shape " + mfdv::to_string(x.shape()) + " does not match model input " +
                     mfdv::to_string(in));
  }
  if (options.noise_samples == 0) throw std::invalid_argument("forward: noise_samples must be >= 1");
  if (options.noise_samples > 1 && !single) throw ShapeError("forward: multiple noise samples need a single example");

  ForwardTrace t;
  t.input = graph.leaf(x, options.input_grad);
  NodeId cur = t.input;
  if (single) {
    Shape b = in;
    b.insert(b.begin(), 1);
    cur = graph.reshape(cur, std::move(b));
  }
  auto param = [&](const std::string& name) {
    const NodeId id = graph.leaf(parameter(name), options.param_grads);
    t.params.emplace_back(name, id);
    return id;
  };
  for (std::size_t i = 0; i < arch_.layers.size(); ++i) {
    std::visit(Overloaded{
                   [&](const Linear&) {
                     const NodeId w = param(param_name(i, "weight"));
                     const NodeId b = param(param_name(i, "bias"));
                     cur = graph.add(graph.matmul(cur, w), b);
                   },
                   [&](const Conv& c) {
                     const NodeId w = param(param_name(i, "weight"));
                     const NodeId b = param(param_name(i, "bias"));
                     cur = graph.conv2d(cur, w, b, c.stride);
                   },
                   [&](const MaxPool&) { cur = graph.maxpool2d(cur); },
                   [&](const Relu&) { cur = graph.relu(cur); },
                   [&](const Flatten&) {
                     const Shape& s = graph.value(cur).shape();
                     cur = graph.reshape(cur, {s[0], numel(s) / s[0]});
                   },
                   [&](const StochasticSlot&) {
                     t.features = cur;
                     if (options.noise_samples > 1) cur = graph.broadcast_rows(cur, options.noise_samples);
                     t.sigma = param(std::string(kSigmaName));
                     const NoisyFeature noisy = stochastic_forward(graph, cur, *t.sigma, rng);
                     t.noise = noisy.noise;
                     cur = noisy.output;
                   },
               },
               arch_.layers[i]);
  }
  if (single && options.noise_samples == 1) cur = graph.reshape(cur, {arch_.num_classes});
  t.logits = cur;
  return t;
}

Tensor Model::forward(const Tensor& x, Mode /*mode: the stochastic slot is active in both*/, Rng& rng) const {
  Graph graph;
  const ForwardTrace t = trace(graph, x, rng);
  return graph.value(t.logits);
}

Tensor input_gradient(const Model& model, const Tensor& x, int label, LossKind loss, Rng& rng,
                      std::size_t noise_samples) {
  if (loss == LossKind::Margin && noise_samples != 1) {
    throw std::invalid_argument("input_gradient: margin loss supports a single noise sample");
  }
  Graph graph;
  const ForwardTrace t = model.trace(graph, x, rng, {.noise_samples = noise_samples, .input_grad = true});
  const NodeId root = loss == LossKind::CrossEntropy
                          ? graph.softmax_cross_entropy(t.logits, std::vector<int>(noise_samples, label))
                          : graph.logit_margin(t.logits, label, 0.0);
  return graph.backward(root)[t.input];
}

double loss_value(const Model& model, const Tensor& x, int label, LossKind loss, Rng& rng) {
  Graph graph;
  const ForwardTrace t = model.trace(graph, x, rng);
  const NodeId root =
      loss == LossKind::CrossEntropy ? graph.softmax_cross_entropy(t.logits, {label}) : graph.logit_margin(t.logits, label, 0.0);
  return graph.value(root).item();
}

}  // namespace mfdv::nn
