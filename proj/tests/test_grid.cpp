//
//   Copyright 2026 The morphatlas Authors
//
//   Licensed under the Apache License, Version 2.0 (the "License");
//   you may not use this file except in compliance with the License.
//   You may obtain a copy of the License at
//
//       http://www.apache.org/licenses/LICENSE-2.0
//
//   Unless required by applicable law or agreed to in writing, software
//   distributed under the License is distributed on an "AS IS" BASIS,
//   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
//   See the License for the specific language governing permissions and
//   limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "morphatlas/grid.hpp"
#include "oracles.hpp"

using namespace morphatlas;

namespace {

GridShape<2> grid2(std::size_t ny, std::size_t nx) { return GridShape<2>({ny, nx}); }

VectorField<2> constant_field(const GridShape<2>& s, double a, double b) {
  VectorField<2> v(s);
  std::fill(v.comp(0).begin(), v.comp(0).end(), a);
  std::fill(v.comp(1).begin(), v.comp(1).end(), b);
  return v;
}

VectorField<2> identity_coords(const GridShape<2>& s) {
  VectorField<2> c(s);
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) { c.set(lin, to_point(idx)); });
  return c;
}

} // namespace

TEST(GridShape, RejectsSmallAxesAndBadSpacing) {
  EXPECT_THROW(GridShape<2>({3, 8}), InvalidConfig);
  EXPECT_THROW(GridShape<2>({8, 8}, {1.0, 0.0}), InvalidConfig);
  EXPECT_NO_THROW(GridShape<3>({4, 4, 4}));
}

TEST(GridShape, LastAxisFastest) {
  GridShape<3> s({4, 5, 6});
  EXPECT_EQ(s.linear({0, 0, 1}), 1u);
  EXPECT_EQ(s.linear({0, 1, 0}), 6u);
  EXPECT_EQ(s.linear({1, 0, 0}), 30u);
  EXPECT_EQ(s.unravel(37), (Index<3>{1, 1, 1}));
}

TEST(Containers, ValueCountMustMatchShape) {
  EXPECT_THROW(ScalarImage<2>(grid2(4, 4), std::vector<double>(15)), ShapeMismatch);
  EXPECT_THROW(VectorField<2>(grid2(4, 4), {std::vector<double>(16), std::vector<double>(12)}), ShapeMismatch);
}

TEST(Interpolate, GridPointsReproduceValuesExactly) {
  const auto s = grid2(7, 9);
  const auto img = oracle::random_image(s, 3);
  const auto out = interpolate(img, identity_coords(s));
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_EQ(out[i], img[i]);
}

TEST(Interpolate, RampMidpointIsLinear) {
  const auto s = grid2(4, 4);
  ScalarImage<2> img(s);
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) { img[lin] = static_cast<double>(idx[0]); });
  EXPECT_DOUBLE_EQ(sample(img, Point<2>{1.5, 2.0}), 1.5);
}

TEST(Interpolate, PeriodicWrapMatchesBruteForce) {
  const auto s = grid2(4, 4);
  const auto img = oracle::random_image(s, 11);
  EXPECT_DOUBLE_EQ(sample(img, Point<2>{-0.5, 1.0}), sample(img, Point<2>{3.5, 1.0}));
  for (double y : {-0.5, -3.25, 3.5, 7.75, 0.1})
    for (double x : {-1.5, 0.0, 2.3, 5.9})
      EXPECT_NEAR(sample(img, Point<2>{y, x}), oracle::interp2(img, y, x), 1e-14);
}

TEST(Interpolate, PointListShapeMismatchThrows) {
  const auto s = grid2(4, 4);
  const auto img = oracle::random_image(s, 1);
  std::vector<Point<2>> pts(5);
  EXPECT_THROW(interpolate<2>(img, pts, s), ShapeMismatch);
}

TEST(WarpImage, ZeroDisplacementIsIdentity) {
  const auto s = grid2(8, 6);
  const auto img = oracle::random_image(s, 5);
  const auto out = warp_image(img, VectorField<2>(s));
  EXPECT_EQ(oracle::max_abs_diff(out, img), 0.0);
}

TEST(WarpImage, IntegerShiftIsCircularShift) {
  const auto s = grid2(8, 6);
  const auto img = oracle::random_image(s, 6);
  const auto out = warp_image(img, constant_field(s, 1.0, 0.0));
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) {
    EXPECT_EQ(out[lin], img.at({(idx[0] + 1) % 8, idx[1]}));
  });
}

TEST(WarpImage, SmoothDisplacementMatchesPerVoxelOracle) {
  const auto s = grid2(16, 16);
  const auto img = oracle::random_image(s, 7);
  VectorField<2> u(s);
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) {
    u.comp(0)[lin] = 1.3 * std::sin(2 * std::numbers::pi * idx[1] / 16.0);
    u.comp(1)[lin] = -0.7 * std::cos(2 * std::numbers::pi * idx[0] / 16.0);
  });
  const auto out = warp_image(img, u);
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) {
    const double ref = oracle::interp2(img, idx[0] + u.comp(0)[lin], idx[1] + u.comp(1)[lin]);
    EXPECT_NEAR(out[lin], ref, 1e-14);
  });
}

TEST(WarpImage, ShapeMismatchThrows) {
  EXPECT_THROW(warp_image(ScalarImage<2>(grid2(4, 4)), VectorField<2>(grid2(4, 5))), ShapeMismatch);
}

TEST(ComposeMaps, IdentityOnEitherSide) {
  const auto s = grid2(16, 16);
  const auto a = oracle::smooth_field(s, 1.5, 1);
  const VectorField<2> zero(s);
  EXPECT_EQ(oracle::max_abs_diff(compose_maps(a, zero), a), 0.0);
  EXPECT_EQ(oracle::max_abs_diff(compose_maps(zero, a), a), 0.0);
}

TEST(ComposeMaps, ConstantShiftsAddAndAssociate) {
  const auto s = grid2(8, 8);
  const auto a = constant_field(s, 0.5, -1.25);
  const auto b = constant_field(s, 2.0, 0.75);
  const auto c = constant_field(s, -0.25, 3.0);
  const auto ab = compose_maps(a, b);
  EXPECT_EQ(oracle::max_abs_diff(ab, constant_field(s, 2.5, -0.5)), 0.0);
  EXPECT_EQ(oracle::max_abs_diff(compose_maps(ab, c), compose_maps(a, compose_maps(b, c))), 0.0);
}

TEST(ComposeMaps, SmoothFieldsAssociateWithinInterpolationError) {
  const auto s = grid2(32, 32);
  const auto a = oracle::smooth_field(s, 1.0, 2);
  const auto b = oracle::smooth_field(s, 1.0, 3);
  const auto c = oracle::smooth_field(s, 1.0, 4);
  const double err = oracle::max_abs_diff(compose_maps(compose_maps(a, b), c), compose_maps(a, compose_maps(b, c)));
  // bilinear error for these fields is bounded by h^2/8 * max|second derivative|
  EXPECT_LT(err, 0.02);
}

TEST(JacobianDeterminant, IdentityAndTranslationAreOne) {
  const auto s = grid2(8, 8);
  for (const auto& u : {VectorField<2>(s), constant_field(s, 0.37, -2.1)}) {
    const auto j = jacobian_determinant(u);
    for (double x : j.values()) EXPECT_EQ(x, 1.0);
  }
}

TEST(JacobianDeterminant, MatchesIndependentStencil) {
  const auto s = grid2(16, 16);
  VectorField<2> u(s);
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) {
    const double y = 2 * std::numbers::pi * idx[0] / 16.0, x = 2 * std::numbers::pi * idx[1] / 16.0;
    u.comp(0)[lin] = 0.1 * std::sin(x + 2 * y);
    u.comp(1)[lin] = 0.1 * std::sin(y) * std::cos(x);
  });
  const auto j = jacobian_determinant(u);
  const auto ref = oracle::jacdet2(u);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(j[i], ref[i], 1e-14);
}

TEST(JacobianDeterminant, ThreeDimensionalTranslation) {
  GridShape<3> s({4, 5, 6});
  VectorField<3> u(s);
  std::fill(u.comp(2).begin(), u.comp(2).end(), 1.5);
  for (double x : jacobian_determinant(u).values()) EXPECT_EQ(x, 1.0);
}
