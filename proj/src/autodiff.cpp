#include "mfdv/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>

#include "mfdv/errors.hpp"

namespace mfdv {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

std::atomic<bool> g_finite_checks{false};

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

[[noreturn]] void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

void expect_arity(std::string_view op, std::size_t got, std::size_t lo, std::size_t hi) {
  if (got < lo || got > hi) {
    throw ShapeError(std::string(op) + ": expected " + std::to_string(lo) + (lo == hi ? "" : "-" + std::to_string(hi)) +
                     " inputs, got " + std::to_string(got));
  }
}

// Size of the broadcast block: rhs must equal lhs or be a trailing suffix of it.
std::size_t broadcast_inner(std::string_view op, const Shape& lhs, const Shape& rhs) {
  if (rhs.size() > lhs.size() || !std::equal(rhs.rbegin(), rhs.rend(), lhs.rbegin())) shape_mismatch(op, lhs, rhs);
  return numel(rhs);
}

struct ConvGeometry {
  std::size_t n, c, h, w, o, ho, wo, stride;
  std::size_t patch() const { return c * 9; }
  std::size_t pixels() const { return ho * wo; }
};

ConvGeometry conv_geometry(const Shape& x, const Shape& w, std::size_t stride) {
  if (x.size() != 4 || w.size() != 4 || w[2] != 3 || w[3] != 3 || w[1] != x[1]) shape_mismatch("conv2d", x, w);
  if (stride != 1 && stride != 2) throw ShapeError("conv2d: stride must be 1 or 2, got " + std::to_string(stride));
  return {x[0], x[1], x[2], x[3], w[0], (x[2] - 1) / stride + 1, (x[3] - 1) / stride + 1, stride};
}

void im2col(const ConvGeometry& g, const double* img, double* col) {
  const std::size_t p = g.pixels();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t kh = 0; kh < 3; ++kh) {
      for (std::size_t kw = 0; kw < 3; ++kw) {
        double* row = col + ((c * 3 + kh) * 3 + kw) * p;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kh) - 1;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kw) - 1;
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<long>(g.h) && iw < static_cast<long>(g.w);
            row[oh * g.wo + ow] = inside ? img[(c * g.h + ih) * g.w + iw] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* col, double* img) {
  const std::size_t p = g.pixels();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t kh = 0; kh < 3; ++kh) {
      for (std::size_t kw = 0; kw < 3; ++kw) {
        const double* row = col + ((c * 3 + kh) * 3 + kw) * p;
        for (std::size_t oh = 0; oh < g.ho; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kh) - 1;
          if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
          for (std::size_t ow = 0; ow < g.wo; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kw) - 1;
            if (iw < 0 || iw >= static_cast<long>(g.w)) continue;
            img[(c * g.h + ih) * g.w + iw] += row[oh * g.wo + ow];
          }
        }
      }
    }
  }
}

std::pair<std::size_t, std::size_t> logits_layout(std::string_view op, const Shape& s) {
  if (s.size() == 1) return {1, s[0]};
  if (s.size() == 2) return {s[0], s[1]};
  throw ShapeError(std::string(op) + ": logits must be [K] or [N,K], got " + to_string(s));
}

struct ForwardResult {
  Tensor value;
  std::vector<double> saved;
};

class Forward {
 public:
  explicit Forward(std::span<const Tensor* const> in) : in_(in) {}

  ForwardResult operator()(const op::Leaf&) const { throw ShapeError("leaf: cannot be applied as an op"); }

  ForwardResult operator()(const op::Add&) const { return binary("add", [](double a, double b) { return a + b; }); }
  ForwardResult operator()(const op::Sub&) const { return binary("sub", [](double a, double b) { return a - b; }); }
  ForwardResult operator()(const op::Mul&) const { return binary("mul", [](double a, double b) { return a * b; }); }

  ForwardResult operator()(const op::MatMul&) const {
    arity("matmul", 2);
    const Tensor& a = *in_[0];
    const Tensor& b = *in_[1];
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) shape_mismatch("matmul", a.shape(), b.shape());
    Tensor out({a.dim(0), b.dim(1)});
    MatMap(out.data().data(), a.dim(0), b.dim(1)).noalias() =
        ConstMatMap(a.data().data(), a.dim(0), a.dim(1)) * ConstMatMap(b.data().data(), b.dim(0), b.dim(1));
    return {std::move(out), {}};
  }

  ForwardResult operator()(const op::Relu&) const {
    return unary("relu", [](double v) { return v > 0.0 ? v : 0.0; });
  }
  ForwardResult operator()(const op::Tanh&) const {
    return unary("tanh", [](double v) { return std::tanh(v); });
  }
  ForwardResult operator()(const op::Log&) const {
    arity("log", 1);
    for (double v : in_[0]->data()) {
      if (!(v > 0.0)) throw NumericError("log: non-positive input " + std::to_string(v));
    }
    return unary("log", [](double v) { return std::log(v); });
  }
  ForwardResult operator()(const op::Sum&) const {
    arity("sum", 1);
    double acc = 0.0;
    for (double v : in_[0]->data()) acc += v;
    return {Tensor::scalar(acc), {}};
  }
  ForwardResult operator()(const op::Scale& s) const {
    return unary("scale", [f = s.factor](double v) { return f * v; });
  }
  ForwardResult operator()(const op::Clamp& c) const {
    if (!(c.lo <= c.hi)) throw ShapeError("clamp: lo > hi");
    return unary("clamp", [&c](double v) { return std::clamp(v, c.lo, c.hi); });
  }
  ForwardResult operator()(const op::Sign&) const {
    return unary("sign", [](double v) { return static_cast<double>((v > 0.0) - (v < 0.0)); });
  }

  ForwardResult operator()(const op::Conv2d& c) const {
    if (in_.size() < 2 || in_.size() > 3) expect_arity("conv2d", in_.size(), 2, 3);
    const Tensor& x = *in_[0];
    const Tensor& w = *in_[1];
    const ConvGeometry g = conv_geometry(x.shape(), w.shape(), c.stride);
    if (in_.size() == 3 && in_[2]->shape() != Shape{g.o}) shape_mismatch("conv2d(bias)", w.shape(), in_[2]->shape());
    Tensor out({g.n, g.o, g.ho, g.wo});
    std::vector<double> col(g.patch() * g.pixels());
    const ConstMatMap wm(w.data().data(), g.o, g.patch());
    for (std::size_t n = 0; n < g.n; ++n) {
      im2col(g, x.data().data() + n * g.c * g.h * g.w, col.data());
      MatMap om(out.data().data() + n * g.o * g.pixels(), g.o, g.pixels());
      om.noalias() = wm * ConstMatMap(col.data(), g.patch(), g.pixels());
      if (in_.size() == 3) {
        for (std::size_t o = 0; o < g.o; ++o) om.row(o).array() += (*in_[2])[o];
      }
    }
    return {std::move(out), {}};
  }

  ForwardResult operator()(const op::MaxPool2d&) const {
    arity("maxpool2d", 1);
    const Tensor& x = *in_[0];
    if (x.rank() != 4 || x.dim(2) < 2 || x.dim(3) < 2) {
      throw ShapeError("maxpool2d: expected [N,C,H,W] with H,W >= 2, got " + to_string(x.shape()));
    }
    const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3), ho = h / 2, wo = w / 2;
    Tensor out({x.dim(0), x.dim(1), ho, wo});
    std::vector<double> argmax(out.size());
    for (std::size_t p = 0; p < nc; ++p) {
      const double* src = x.data().data() + p * h * w;
      for (std::size_t i = 0; i < ho; ++i) {
        for (std::size_t j = 0; j < wo; ++j) {
          std::size_t best = (2 * i) * w + 2 * j;
          for (std::size_t di = 0; di < 2; ++di) {
            for (std::size_t dj = 0; dj < 2; ++dj) {
              const std::size_t idx = (2 * i + di) * w + 2 * j + dj;
              if (src[idx] > src[best]) best = idx;
            }
          }
          const std::size_t o = (p * ho + i) * wo + j;
          out[o] = src[best];
          argmax[o] = static_cast<double>(p * h * w + best);
        }
      }
    }
    return {std::move(out), std::move(argmax)};
  }

  ForwardResult operator()(const op::Reshape& r) const {
    arity("reshape", 1);
    return {in_[0]->reshaped(r.shape), {}};
  }

  ForwardResult operator()(const op::BroadcastRows& b) const {
    arity("broadcast_rows", 1);
    const Tensor& x = *in_[0];
    Shape shape = x.shape();
    if (!shape.empty() && shape[0] == 1 && shape.size() > 1) {
      shape[0] = b.rows;
    } else {
      shape.insert(shape.begin(), b.rows);
    }
    Tensor out(std::move(shape));
    for (std::size_t r = 0; r < b.rows; ++r) std::copy(x.data().begin(), x.data().end(), out.data().begin() + r * x.size());
    return {std::move(out), {}};
  }

  ForwardResult operator()(const op::SoftmaxCrossEntropy& ce) const {
    arity("softmax_cross_entropy", 1);
    const Tensor& z = *in_[0];
    const auto [n, k] = logits_layout("softmax_cross_entropy", z.shape());
    if (ce.labels.size() != n) {
      throw ShapeError("softmax_cross_entropy: " + std::to_string(ce.labels.size()) + " labels for logits " +
                       to_string(z.shape()));
    }
    Tensor probs = softmax(z);
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      const int y = ce.labels[r];
      if (y < 0 || static_cast<std::size_t>(y) >= k) throw ShapeError("softmax_cross_entropy: label out of range");
      const double* row = z.data().data() + r * k;
      const double m = *std::max_element(row, row + k);
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
      loss += m + std::log(s) - row[y];
    }
    return {Tensor::scalar(loss / static_cast<double>(n)), std::move(probs).values()};
  }

  ForwardResult operator()(const op::LogitMargin& lm) const {
    arity("logit_margin", 1);
    const Tensor& z = *in_[0];
    const auto [n, k] = logits_layout("logit_margin", z.shape());
    if (n != 1 || k < 2) throw ShapeError("logit_margin: expected a single logit row with K >= 2, got " + to_string(z.shape()));
    if (lm.label < 0 || static_cast<std::size_t>(lm.label) >= k) throw ShapeError("logit_margin: label out of range");
    std::size_t other = lm.label == 0 ? 1 : 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (j != static_cast<std::size_t>(lm.label) && z[j] > z[other]) other = j;
    }
    const double margin = z[lm.label] - z[other];
    const bool clamped = margin < -lm.kappa;
    return {Tensor::scalar(clamped ? -lm.kappa : margin), {static_cast<double>(other), clamped ? 1.0 : 0.0}};
  }

 private:
  void arity(std::string_view name, std::size_t n) const { expect_arity(name, in_.size(), n, n); }

  template <class F>
  ForwardResult unary(std::string_view name, F f) const {
    arity(name, 1);
    Tensor out(in_[0]->shape());
    const auto src = in_[0]->data();
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = f(src[i]);
    return {std::move(out), {}};
  }

  template <class F>
  ForwardResult binary(std::string_view name, F f) const {
    arity(name, 2);
    const Tensor& a = *in_[0];
    const Tensor& b = *in_[1];
    const std::size_t inner = broadcast_inner(name, a.shape(), b.shape());
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i % inner]);
    return {std::move(out), {}};
  }

  std::span<const Tensor* const> in_;
};

}  // namespace

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled, std::memory_order_relaxed); }
bool finite_checks_enabled() { return g_finite_checks.load(std::memory_order_relaxed); }

std::string_view op_name(const Op& op) {
  return std::visit(Overloaded{
                        [](const op::Leaf&) { return "leaf"; },
                        [](const op::Add&) { return "add"; },
                        [](const op::Sub&) { return "sub"; },
                        [](const op::Mul&) { return "mul"; },
                        [](const op::MatMul&) { return "matmul"; },
                        [](const op::Relu&) { return "relu"; },
                        [](const op::Tanh&) { return "tanh"; },
                        [](const op::Log&) { return "log"; },
                        [](const op::Sum&) { return "sum"; },
                        [](const op::Scale&) { return "scale"; },
                        [](const op::Clamp&) { return "clamp"; },
                        [](const op::Sign&) { return "sign"; },
                        [](const op::Conv2d&) { return "conv2d"; },
                        [](const op::MaxPool2d&) { return "maxpool2d"; },
                        [](const op::Reshape&) { return "reshape"; },
                        [](const op::BroadcastRows&) { return "broadcast_rows"; },
                        [](const op::SoftmaxCrossEntropy&) { return "softmax_cross_entropy"; },
                        [](const op::LogitMargin&) { return "logit_margin"; },
                    },
                    op);
}

Tensor softmax(const Tensor& logits) {
  const auto [n, k] = logits_layout("softmax", logits.shape());
  Tensor out(logits.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = logits.data().data() + r * k;
    double* dst = out.data().data() + r * k;
    const double m = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += (dst[j] = std::exp(row[j] - m));
    for (std::size_t j = 0; j < k; ++j) dst[j] /= s;
  }
  return out;
}

const Tensor& Gradients::operator[](NodeId id) const {
  if (!contains(id)) throw std::out_of_range("gradients: node " + std::to_string(id) + " has no gradient");
  return *grads_[id];
}

NodeId Graph::leaf(Tensor value, bool requires_grad) {
  if (finite_checks_enabled() && !value.all_finite()) throw NumericError("leaf: non-finite value");
  nodes_.push_back(TapeNode{op::Leaf{}, {}, std::move(value), requires_grad, {}});
  return nodes_.size() - 1;
}

NodeId Graph::apply(Op op, std::span<const NodeId> inputs) {
  std::vector<const Tensor*> in;
  in.reserve(inputs.size());
  bool requires_grad = false;
  for (NodeId id : inputs) {
    if (id >= nodes_.size()) throw std::out_of_range("graph: unknown input node " + std::to_string(id));
    in.push_back(&nodes_[id].value);
    requires_grad = requires_grad || nodes_[id].requires_grad;
  }
  ForwardResult r = std::visit(Forward(in), op);
  if (finite_checks_enabled() && !r.value.all_finite()) {
    throw NumericError(std::string(op_name(op)) + ": non-finite output");
  }
  if (std::holds_alternative<op::Sign>(op)) requires_grad = false;
  nodes_.push_back(TapeNode{std::move(op), {inputs.begin(), inputs.end()}, std::move(r.value), requires_grad,
                            std::move(r.saved)});
  return nodes_.size() - 1;
}

Gradients Graph::backward(NodeId root) const {
  if (root >= nodes_.size()) throw std::out_of_range("backward: unknown root");
  if (!nodes_[root].value.is_scalar()) {
    throw ShapeError("backward: root must be scalar, got shape " + to_string(nodes_[root].value.shape()));
  }
  std::vector<std::optional<Tensor>> grads(nodes_.size());
  auto slot = [&](NodeId id) -> Tensor* {
    if (!nodes_[id].requires_grad) return nullptr;
    if (!grads[id]) grads[id] = Tensor(nodes_[id].value.shape());
    return &*grads[id];
  };
  if (nodes_[root].requires_grad) grads[root] = Tensor::full(nodes_[root].value.shape(), 1.0);

  for (NodeId id = root + 1; id-- > 0;) {
    const TapeNode& node = nodes_[id];
    if (!grads[id] || std::holds_alternative<op::Leaf>(node.op)) continue;
    const Tensor& g = *grads[id];
    const auto& in = node.inputs;
    auto value_of = [&](std::size_t k) -> const Tensor& { return nodes_[in[k]].value; };

    std::visit(
        Overloaded{
            [](const op::Leaf&) {},
            [&](const op::Add&) {
              if (Tensor* ga = slot(in[0])) {
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
              }
              if (Tensor* gb = slot(in[1])) {
                const std::size_t inner = gb->size();
                for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % inner] += g[i];
              }
            },
            [&](const op::Sub&) {
              if (Tensor* ga = slot(in[0])) {
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
              }
              if (Tensor* gb = slot(in[1])) {
                const std::size_t inner = gb->size();
                for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % inner] -= g[i];
              }
            },
            [&](const op::Mul&) {
              const Tensor& a = value_of(0);
              const Tensor& b = value_of(1);
              const std::size_t inner = b.size();
              if (Tensor* ga = slot(in[0])) {
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * b[i % inner];
              }
              if (Tensor* gb = slot(in[1])) {
                for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i % inner] += g[i] * a[i];
              }
            },
            [&](const op::MatMul&) {
              const Tensor& a = value_of(0);
              const Tensor& b = value_of(1);
              const ConstMatMap gm(g.data().data(), g.dim(0), g.dim(1));
              if (Tensor* ga = slot(in[0])) {
                MatMap(ga->data().data(), a.dim(0), a.dim(1)).noalias() +=
                    gm * ConstMatMap(b.data().data(), b.dim(0), b.dim(1)).transpose();
              }
              if (Tensor* gb = slot(in[1])) {
                MatMap(gb->data().data(), b.dim(0), b.dim(1)).noalias() +=
                    ConstMatMap(a.data().data(), a.dim(0), a.dim(1)).transpose() * gm;
              }
            },
            [&](const op::Relu&) {
              if (Tensor* ga = slot(in[0])) {
                const Tensor& x = value_of(0);
                for (std::size_t i = 0; i < g.size(); ++i) {
                  if (x[i] > 0.0) (*ga)[i] += g[i];
                }
              }
            },
            [&](const op::Tanh&) {
              if (Tensor* ga = slot(in[0])) {
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (1.0 - node.value[i] * node.value[i]);
              }
            },
            [&](const op::Log&) {
              if (Tensor* ga = slot(in[0])) {
                const Tensor& x = value_of(0);
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / x[i];
              }
            },
            [&](const op::Sum&) {
              if (Tensor* ga = slot(in[0])) {
                const double s = g.item();
                for (double& v : ga->data()) v += s;
              }
            },
            [&](const op::Scale& s) {
              if (Tensor* ga = slot(in[0])) {
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s.factor * g[i];
              }
            },
            [&](const op::Clamp& c) {
              if (Tensor* ga = slot(in[0])) {
                const Tensor& x = value_of(0);
                for (std::size_t i = 0; i < g.size(); ++i) {
                  if (x[i] >= c.lo && x[i] <= c.hi) (*ga)[i] += g[i];
                }
              }
            },
            [](const op::Sign&) {},
            [&](const op::Conv2d& c) {
              const Tensor& x = value_of(0);
              const Tensor& w = value_of(1);
              const ConvGeometry geo = conv_geometry(x.shape(), w.shape(), c.stride);
              Tensor* gx = slot(in[0]);
              Tensor* gw = slot(in[1]);
              Tensor* gbias = in.size() == 3 ? slot(in[2]) : nullptr;
              std::vector<double> col(geo.patch() * geo.pixels());
              std::vector<double> dcol(gx ? col.size() : 0);
              const ConstMatMap wm(w.data().data(), geo.o, geo.patch());
              for (std::size_t n = 0; n < geo.n; ++n) {
                const ConstMatMap gout(g.data().data() + n * geo.o * geo.pixels(), geo.o, geo.pixels());
                if (gw) {
                  im2col(geo, x.data().data() + n * geo.c * geo.h * geo.w, col.data());
                  MatMap(gw->data().data(), geo.o, geo.patch()).noalias() +=
                      gout * ConstMatMap(col.data(), geo.patch(), geo.pixels()).transpose();
                }
                if (gx) {
                  MatMap(dcol.data(), geo.patch(), geo.pixels()).noalias() = wm.transpose() * gout;
                  col2im_add(geo, dcol.data(), gx->data().data() + n * geo.c * geo.h * geo.w);
                }
                if (gbias) {
                  for (std::size_t o = 0; o < geo.o; ++o) (*gbias)[o] += gout.row(o).sum();
                }
              }
            },
            [&](const op::MaxPool2d&) {
              if (Tensor* ga = slot(in[0])) {
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[static_cast<std::size_t>(node.saved[i])] += g[i];
              }
            },
            [&](const op::Reshape&) {
              if (Tensor* ga = slot(in[0])) {
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
              }
            },
            [&](const op::BroadcastRows&) {
              if (Tensor* ga = slot(in[0])) {
                const std::size_t inner = ga->size();
                for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i % inner] += g[i];
              }
            },
            [&](const op::SoftmaxCrossEntropy& ce) {
              if (Tensor* ga = slot(in[0])) {
                const std::size_t n = ce.labels.size();
                const std::size_t k = ga->size() / n;
                const double s = g.item() / static_cast<double>(n);
                for (std::size_t r = 0; r < n; ++r) {
                  for (std::size_t j = 0; j < k; ++j) {
                    const double onehot = static_cast<std::size_t>(ce.labels[r]) == j ? 1.0 : 0.0;
                    (*ga)[r * k + j] += s * (node.saved[r * k + j] - onehot);
                  }
                }
              }
            },
            [&](const op::LogitMargin& lm) {
              Tensor* ga = slot(in[0]);
              if (!ga || node.saved[1] != 0.0) return;
              const double s = g.item();
              (*ga)[static_cast<std::size_t>(lm.label)] += s;
              (*ga)[static_cast<std::size_t>(node.saved[0])] -= s;
            },
        },
        node.op);
  }

  for (NodeId id = 0; id < nodes_.size(); ++id) {
    const TapeNode& node = nodes_[id];
    if (node.requires_grad && std::holds_alternative<op::Leaf>(node.op) && !grads[id]) {
      grads[id] = Tensor(node.value.shape());
    }
  }
  return Gradients(std::move(grads));
}

}  // namespace mfdv
