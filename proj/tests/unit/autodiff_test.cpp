#include <gtest/gtest.h>

#include "modelmix/autodiff.hpp"
#include "modelmix/ops.hpp"

using namespace modelmix;

namespace {

Tensor4<double> filled(Shape4 s, std::initializer_list<double> v) { return Tensor4<double>(s, std::vector<double>(v)); }

}  // namespace

TEST(Autodiff, LinearCombinationGradient) {
  const Shape4 s{1, 1, 1, 3};
  auto a = Var<double>::leaf(filled(s, {1, 2, 3}), true);
  auto b = Var<double>::leaf(filled(s, {4, 5, 6}), true);
  const Tensor4<double> w = filled(s, {1, -1, 0.5});
  Var<double> y = weighted_sum(axpby(2.0, a, 3.0, b), w);
  // 2*(1 - 2 + 1.5) + 3*(4 - 5 + 3)
  EXPECT_DOUBLE_EQ(y.item(), 2.0 * 0.5 + 3.0 * 2.0);
  backward(y);
  EXPECT_EQ(a.grad(), filled(s, {2, -2, 1}));
  EXPECT_EQ(b.grad(), filled(s, {3, -3, 1.5}));
}

TEST(Autodiff, DiamondAccumulates) {
  const Shape4 s{1, 1, 1, 2};
  auto a = Var<double>::leaf(filled(s, {1, 2}), true);
  backward(weighted_sum(add(a, scale(a, 3.0)), filled(s, {1, 1})));
  EXPECT_EQ(a.grad(), filled(s, {4, 4}));
}

TEST(Autodiff, LeafGradientsAccumulateUntilZeroed) {
  const Shape4 s{1, 1, 1, 1};
  auto a = Var<double>::leaf(filled(s, {2}), true);
  backward(weighted_sum(a, filled(s, {5})));
  backward(weighted_sum(a, filled(s, {5})));
  EXPECT_DOUBLE_EQ(a.grad()[0], 10.0);
  a.zero_grad();
  EXPECT_FALSE(a.has_grad());
  EXPECT_DOUBLE_EQ(a.grad()[0], 0.0);
}

TEST(Autodiff, DetachBlocksGradient) {
  const Shape4 s{1, 1, 1, 1};
  auto a = Var<double>::leaf(filled(s, {3}), true);
  Var<double> y = weighted_sum(add(a, detach(scale(a, 2.0))), filled(s, {1}));
  EXPECT_DOUBLE_EQ(y.item(), 9.0);
  backward(y);
  EXPECT_DOUBLE_EQ(a.grad()[0], 1.0);
}

TEST(Autodiff, ConstantsStayOutOfTheGraph) {
  const Shape4 s{1, 1, 1, 2};
  auto c = Var<double>::leaf(filled(s, {1, 2}));
  Var<double> y = scale(c, 2.0);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_EQ(y.value(), filled(s, {2, 4}));
}

TEST(Autodiff, BackwardRequiresScalarRoot) {
  auto a = Var<double>::leaf(Tensor4<double>(Shape4{1, 1, 1, 2}), true);
  EXPECT_THROW(backward(scale(a, 1.0)), ContractViolation);
}
