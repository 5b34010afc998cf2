#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "miles/tensor.hpp"

using miles::Tensor;

TEST(Tensor, ShapeAndDataLengthMustAgree) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), miles::DimensionError);
  EXPECT_THROW(Tensor<float>(miles::Shape{}), miles::DimensionError);
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3u);
  EXPECT_THROW(t.dim(2), miles::DimensionError);
}

TEST(Tensor, ReshapeKeepsDataAndChecksCount) {
  Tensor<double> t({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  const auto r = t.reshaped({3, 2});
  EXPECT_EQ(r.vec(), t.vec());
  EXPECT_THROW(t.reshaped({4, 2}), miles::DimensionError);
}

TEST(Tensor, ItemRequiresOneElement) {
  EXPECT_EQ(Tensor<float>::scalar(2.5f).item(), 2.5f);
  EXPECT_THROW(Tensor<float>({2}).item(), miles::DimensionError);
}

TEST(Tensor, FiniteCheck) {
  Tensor<float> t({3}, 0.0f);
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<float>::infinity();
  EXPECT_FALSE(t.all_finite());
  t[1] = std::nanf("");
  EXPECT_FALSE(t.all_finite());
}

TEST(Tensor, CastAndMaxAbsDiff) {
  Tensor<double> d({2}, std::vector<double>{0.5, -1.25});
  const Tensor<float> f = d.cast<float>();
  EXPECT_EQ(f[0], 0.5f);
  EXPECT_EQ(f[1], -1.25f);
  Tensor<double> e({2}, std::vector<double>{0.5, -1.0});
  EXPECT_DOUBLE_EQ(miles::max_abs_diff(d, e), 0.25);
}
