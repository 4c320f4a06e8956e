#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Graph is an append-only tape. Every op computes its value eagerly when it
// is recorded; backward() walks the tape once in reverse id order. Inputs of a
// node always have smaller ids than the node itself.

#include <cstddef>
#include <initializer_list>
#include <optional>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "mfdv/tensor.hpp"

namespace mfdv {

using NodeId = std::size_t;

namespace op {

struct Leaf {};
/// Elementwise; rhs may also be a trailing-suffix shape of lhs (broadcast over leading axes).
struct Add {};
struct Sub {};
struct Mul {};
/// [M,K] x [K,N] -> [M,N]
struct MatMul {};
struct Relu {};
struct Tanh {};
/// Natural log; non-positive input is a NumericError.
struct Log {};
/// Sum of all elements -> scalar.
struct Sum {};
struct Scale {
  double factor = 1.0;
};
struct Clamp {
  double lo = 0.0;
  double hi = 1.0;
};
/// Forward sign(x); backward contributes exactly zero.
struct Sign {};
/// 3x3 kernel, zero padding 1. Inputs: x[N,C,H,W], w[O,C,3,3], optional bias[O].
struct Conv2d {
  std::size_t stride = 1;
};
/// 2x2 window, stride 2.
struct MaxPool2d {};
struct Reshape {
  Shape shape;
};
/// [1,...] or [D] -> [rows, ...]; backward sums over the new rows.
struct BroadcastRows {
  std::size_t rows = 1;
};
/// Mean softmax cross-entropy over the batch. Logits [N,K] (or [K] with one label).
struct SoftmaxCrossEntropy {
  std::vector<int> labels;
};
/// max(z_y - max_{j != y} z_j, -kappa) for logits [K] or [1,K].
struct LogitMargin {
  int label = 0;
  double kappa = 0.0;
};

}  // namespace op

using Op = std::variant<op::Leaf, op::Add, op::Sub, op::Mul, op::MatMul, op::Relu, op::Tanh, op::Log, op::Sum,
                        op::Scale, op::Clamp, op::Sign, op::Conv2d, op::MaxPool2d, op::Reshape, op::BroadcastRows,
                        op::SoftmaxCrossEntropy, op::LogitMargin>;

std::string_view op_name(const Op& op);

struct TapeNode {
  Op op;
  std::vector<NodeId> inputs;
  Tensor value;
  bool requires_grad = false;
  /// Forward by-products needed by the backward rule (softmax probs, pool argmax, ...).
  std::vector<double> saved;
};

class Gradients {
 public:
  explicit Gradients(std::vector<std::optional<Tensor>> grads) : grads_(std::move(grads)) {}

  /// Gradient w.r.t. a requires-grad node. Throws if the node was not a requires-grad leaf/ancestor.
  const Tensor& operator[](NodeId id) const;
  bool contains(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }

 private:
  std::vector<std::optional<Tensor>> grads_;
};

class Graph {
 public:
  NodeId leaf(Tensor value, bool requires_grad = false);
  NodeId constant(Tensor value) { return leaf(std::move(value), false); }

  /// Records `op` applied to `inputs`, computing its value eagerly.
  NodeId apply(Op op, std::span<const NodeId> inputs);
  NodeId apply(Op op, std::initializer_list<NodeId> inputs) {
    return apply(std::move(op), std::span<const NodeId>(inputs.begin(), inputs.size()));
  }

  NodeId add(NodeId a, NodeId b) { return apply(op::Add{}, {a, b}); }
  NodeId sub(NodeId a, NodeId b) { return apply(op::Sub{}, {a, b}); }
  NodeId mul(NodeId a, NodeId b) { return apply(op::Mul{}, {a, b}); }
  NodeId matmul(NodeId a, NodeId b) { return apply(op::MatMul{}, {a, b}); }
  NodeId relu(NodeId a) { return apply(op::Relu{}, {a}); }
  NodeId tanh(NodeId a) { return apply(op::Tanh{}, {a}); }
  NodeId log(NodeId a) { return apply(op::Log{}, {a}); }
  NodeId sum(NodeId a) { return apply(op::Sum{}, {a}); }
  NodeId scale(NodeId a, double factor) { return apply(op::Scale{factor}, {a}); }
  NodeId clamp(NodeId a, double lo, double hi) { return apply(op::Clamp{lo, hi}, {a}); }
  NodeId sign(NodeId a) { return apply(op::Sign{}, {a}); }
  NodeId conv2d(NodeId x, NodeId w, std::size_t stride = 1) { return apply(op::Conv2d{stride}, {x, w}); }
  NodeId conv2d(NodeId x, NodeId w, NodeId b, std::size_t stride) { return apply(op::Conv2d{stride}, {x, w, b}); }
  NodeId maxpool2d(NodeId x) { return apply(op::MaxPool2d{}, {x}); }
  NodeId reshape(NodeId x, Shape shape) { return apply(op::Reshape{std::move(shape)}, {x}); }
  NodeId broadcast_rows(NodeId x, std::size_t rows) { return apply(op::BroadcastRows{rows}, {x}); }
  NodeId softmax_cross_entropy(NodeId logits, std::vector<int> labels) {
    return apply(op::SoftmaxCrossEntropy{std::move(labels)}, {logits});
  }
  NodeId logit_margin(NodeId logits, int label, double kappa) { return apply(op::LogitMargin{label, kappa}, {logits}); }

  const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  const TapeNode& node(NodeId id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse sweep from a scalar root. The result holds a gradient for every
  /// requires-grad leaf (zeros when the leaf does not reach `root`).
  Gradients backward(NodeId root) const;

 private:
  std::vector<TapeNode> nodes_;
};

/// Debug toggle: when on, every recorded op checks its output for NaN/Inf.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

/// Numerically stable softmax over the last axis.
Tensor softmax(const Tensor& logits);

}  // namespace mfdv
