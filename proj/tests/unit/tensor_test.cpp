#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "modelmix/tensor.hpp"

using namespace modelmix;

TEST(Shape4, NumelAndPlane) {
  const Shape4 s{2, 3, 4, 5};
  EXPECT_EQ(s.numel(), 120u);
  EXPECT_EQ(s.plane(), 20u);
  EXPECT_EQ(s.str(), "(2, 3, 4, 5)");
}

TEST(Tensor4, RowMajorIndexing) {
  Tensor4<double> t(Shape4{2, 3, 4, 5});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<double>(i);
  EXPECT_EQ(t(1, 2, 3, 4), 119.0);
  EXPECT_EQ(t(0, 1, 0, 0), 20.0);
  EXPECT_EQ(t(1, 0, 2, 1), 60.0 + 10.0 + 1.0);
  EXPECT_EQ(t.plane(1, 1)[0], 80.0);
}

TEST(Tensor4, DataLengthMismatchThrows) {
  EXPECT_THROW(Tensor4<float>(Shape4{1, 1, 2, 2}, std::vector<float>(3)), ContractViolation);
}

TEST(Tensor4, MaxAbsDiffAndFinite) {
  Tensor4<double> a(Shape4{1, 1, 2, 2}, 1.0), b(Shape4{1, 1, 2, 2}, 1.0);
  b[3] = -1.5;
  EXPECT_DOUBLE_EQ(max_abs_diff(a, b), 2.5);
  EXPECT_TRUE(all_finite(a));
  a[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(all_finite(a));
  EXPECT_THROW(max_abs_diff(a, Tensor4<double>(Shape4{1, 1, 2, 3})), ContractViolation);
}

TEST(Tensor4, RequireSameShapeNamesBoth) {
  try {
    require_same_shape(Shape4{1, 2, 3, 4}, Shape4{1, 2, 3, 5}, "add");
    FAIL() << "expected a throw";
  } catch (const ContractViolation& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(1, 2, 3, 4)"), std::string::npos);
    EXPECT_NE(msg.find("(1, 2, 3, 5)"), std::string::npos);
  }
}

TEST(Tensor4, CastRoundTrip) {
  Tensor4<double> a(Shape4{1, 2, 1, 2}, std::vector<double>{0.5, -1.25, 3.0, 8.0});
  EXPECT_EQ(a.cast<float>().cast<double>(), a);
}
