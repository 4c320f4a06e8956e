#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "mfdv/autodiff.hpp"
#include "mfdv/errors.hpp"
#include "mfdv/model.hpp"

namespace mfdv {
namespace {

Tensor vec(std::initializer_list<double> v) { return Tensor({v.size()}, std::vector<double>(v)); }

TEST(Tensor, RejectsDataOfWrongLength) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_EQ(Tensor({2, 3}).size(), 6u);
  EXPECT_EQ(Tensor().rank(), 0u);
}

TEST(Autodiff, ForwardExamples) {
  Graph g;
  const NodeId a = g.constant(vec({1, 2}));
  const NodeId b = g.constant(vec({3, 4}));
  EXPECT_EQ(g.value(g.add(a, b)).values(), (std::vector<double>{4, 6}));

  const NodeId eye = g.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  const NodeId m = g.constant(Tensor({2, 2}, {5, 6, 7, 8}));
  EXPECT_EQ(g.value(g.matmul(eye, m)), Tensor({2, 2}, {5, 6, 7, 8}));

  EXPECT_EQ(g.value(g.relu(g.constant(vec({-1, 0, 2})))).values(), (std::vector<double>{0, 0, 2}));
}

TEST(Autodiff, ShapeErrorNamesOpAndShapes) {
  Graph g;
  const NodeId a = g.constant(Tensor({2}));
  const NodeId b = g.constant(Tensor({3}));
  try {
    g.add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos);
    EXPECT_NE(msg.find("[2]"), std::string::npos);
    EXPECT_NE(msg.find("[3]"), std::string::npos);
  }
  EXPECT_THROW(g.matmul(g.constant(Tensor({2, 3})), g.constant(Tensor({2, 3}))), ShapeError);
}

TEST(Autodiff, SquareDerivative) {
  Graph g;
  const NodeId x = g.leaf(Tensor::scalar(3.0), true);
  EXPECT_DOUBLE_EQ(g.backward(g.mul(x, x))[x].item(), 6.0);
}

TEST(Autodiff, NegativeLogGradientIsMinusInverse) {
  Graph g;
  const NodeId s = g.leaf(Tensor::scalar(2.0), true);
  EXPECT_DOUBLE_EQ(g.backward(g.scale(g.log(s), -1.0))[s].item(), -0.5);
}

TEST(Autodiff, NonScalarRootThrows) {
  Graph g;
  const NodeId x = g.leaf(Tensor({3}), true);
  EXPECT_THROW(g.backward(g.relu(x)), ShapeError);
}

TEST(Autodiff, UnreachableLeafGetsZeros) {
  Graph g;
  const NodeId x = g.leaf(vec({1, 2}), true);
  const NodeId unused = g.leaf(vec({5, 5, 5}), true);
  const Gradients grads = g.backward(g.sum(x));
  EXPECT_EQ(grads[unused], Tensor({3}));
}

TEST(Autodiff, SignIsStopGradient) {
  Graph g;
  const NodeId x = g.leaf(vec({-0.3, 0.7}), true);
  const NodeId y = g.add(g.sign(x), g.scale(x, 0.0));
  EXPECT_EQ(g.backward(g.sum(y))[x], Tensor({2}));
}

TEST(Autodiff, LogOfNonPositiveThrows) {
  Graph g;
  EXPECT_THROW(g.log(g.constant(vec({1.0, 0.0}))), NumericError);
}

TEST(Autodiff, RepeatedBackwardIsIdenticalAndDeterministic) {
  Rng rng(4);
  for (const auto& fam : testing::op_families()) {
    const testing::GradCase c = fam.make(rng);
    Graph g;
    std::vector<NodeId> ids;
    for (const auto& t : c.inputs) ids.push_back(g.leaf(t, true));
    const NodeId root = g.sum(g.mul(c.build(g, ids), g.constant(c.projection)));
    const Gradients first = g.backward(root);
    const Gradients second = g.backward(root);
    for (NodeId id : ids) EXPECT_EQ(first[id], second[id]) << fam.name;
  }
}

TEST(Autodiff, FiniteChecksFlagNonFiniteValues) {
  set_finite_checks(true);
  Graph g;
  const NodeId big = g.constant(vec({1e308}));
  EXPECT_THROW(g.scale(big, 10.0), NumericError);
  set_finite_checks(false);
  Graph h;
  EXPECT_NO_THROW(h.scale(h.constant(vec({1e308})), 10.0));
}

// One parameterized case per op family, 120 random draws each.
class OpGradient : public ::testing::TestWithParam<testing::OpFamily> {};

TEST_P(OpGradient, MatchesCentralDifferences) {
  const auto& fam = GetParam();
  Rng rng(derive_seed(17, std::hash<std::string>{}(fam.name) % 1000, 0));
  double worst = 0.0;
  for (int i = 0; i < 120; ++i) worst = std::max(worst, testing::relative_error(fam.make(rng)));
  EXPECT_LE(worst, 1e-4) << fam.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::ValuesIn(testing::op_families()),
                         [](const auto& info) { return info.param.name; });

TEST(InputGradient, LinearModelClosedForm) {
  Rng init(3);
  nn::Model model(nn::linear_classifier(4, 3), init);
  Rng rng(1);
  const Tensor x = testing::random_tensor({4}, rng, 0.0, 1.0);
  const int y = 2;
  const Tensor& w = model.parameter("layer0.weight");  // [in, out]
  const Tensor& b = model.parameter("layer0.bias");
  Tensor z({3});
  for (std::size_t j = 0; j < 3; ++j) {
    z[j] = b[j];
    for (std::size_t i = 0; i < 4; ++i) z[j] += x[i] * w[i * 3 + j];
  }
  const Tensor p = softmax(z);
  const Tensor g = nn::input_gradient(model, x, y, nn::LossKind::CrossEntropy, rng);
  for (std::size_t i = 0; i < 4; ++i) {
    double expect = 0.0;
    for (std::size_t j = 0; j < 3; ++j) expect += (p[j] - (static_cast<int>(j) == y ? 1.0 : 0.0)) * w[i * 3 + j];
    EXPECT_NEAR(g[i], expect, 1e-12);
  }
}

TEST(InputGradient, ZeroWeightsGiveZeroGradient) {
  Rng init(3);
  nn::Model model(nn::linear_classifier(5, 4), init);
  model.set_parameter("layer0.weight", Tensor({5, 4}));
  Rng rng(0);
  EXPECT_EQ(nn::input_gradient(model, Tensor::full({5}, 0.5), 1, nn::LossKind::CrossEntropy, rng), Tensor({5}));
}

TEST(InputGradient, CnnOnEightByEightMatchesFiniteDifferences) {
  Rng init(9);
  nn::Model model(nn::mini_cnn(1, 8, 8, 6, 3, false, 2, 3), init);
  Rng rng(2);
  const Tensor x = testing::random_tensor({1, 8, 8}, rng, 0.0, 1.0);
  const Tensor g = nn::input_gradient(model, x, 1, nn::LossKind::CrossEntropy, rng);
  double diff2 = 0.0, norm2 = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor up = x, down = x;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    const double num = (nn::loss_value(model, up, 1, nn::LossKind::CrossEntropy, rng) -
                        nn::loss_value(model, down, 1, nn::LossKind::CrossEntropy, rng)) / 2e-5;
    diff2 += (g[i] - num) * (g[i] - num);
    norm2 += num * num;
  }
  EXPECT_LE(std::sqrt(diff2 / norm2), 1e-4);
}

}  // namespace
}  // namespace mfdv
