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
#include <random>

#include "morphatlas/spectral.hpp"
#include "oracles.hpp"

using namespace morphatlas;

namespace {

constexpr double kPi = std::numbers::pi;

// Discrete Laplacian symbol for the given wave numbers.
double ell(const MetricParams& p, const GridShape<2>& s, int ky, int kx) {
  return p.gamma + 2 * p.alpha * ((1 - std::cos(2 * kPi * ky / s.dims[0])) / (s.spacing[0] * s.spacing[0]) +
                                  (1 - std::cos(2 * kPi * kx / s.dims[1])) / (s.spacing[1] * s.spacing[1]));
}

VectorField<2> cos_mode(const GridShape<2>& s, int ky, int kx, double amp, std::size_t comp) {
  VectorField<2> v(s);
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) {
    v.comp(comp)[lin] = amp * std::cos(2 * kPi * (ky * double(idx[0]) / s.dims[0] + kx * double(idx[1]) / s.dims[1]));
  });
  return v;
}

VectorField<2> noise_field(const GridShape<2>& s, unsigned seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> n;
  VectorField<2> v(s);
  for (std::size_t c = 0; c < 2; ++c)
    for (auto& x : v.comp(c)) x = n(rng);
  return v;
}

double rel_err(const VectorField<2>& a, const VectorField<2>& b) {
  return oracle::max_abs_diff(a, b) / std::max(b.max_abs(), 1e-300);
}

} // namespace

TEST(MetricOperator, MultipliersArePositiveDefinite) {
  const GridShape<2> s({12, 10}, {1.0, 0.5});
  const MetricParams p;
  const MetricOperator<2> op(s, p);
  const double floor = std::pow(p.gamma, p.power);
  EXPECT_EQ(op.multipliers()[0], floor);
  for (double m : op.multipliers()) EXPECT_GE(m, floor);
}

TEST(MetricOperator, RejectsBadParams) {
  EXPECT_THROW(MetricOperator<2>(GridShape<2>({8, 8}), MetricParams{0.0, 1.0, 3}), InvalidConfig);
  EXPECT_THROW(MetricOperator<2>(GridShape<2>({8, 8}), MetricParams{1.0, 1.0, 0}), InvalidConfig);
}

TEST(ApplyL, ZeroAndConstant) {
  const GridShape<2> s({8, 8});
  const MetricOperator<2> op(s, MetricParams{});
  EXPECT_EQ(op.apply_L(VectorField<2>(s)).max_abs(), 0.0);
  VectorField<2> c(s);
  std::fill(c.comp(0).begin(), c.comp(0).end(), 1.0);
  const auto lc = op.apply_L(c);
  for (double x : lc.comp(0)) EXPECT_NEAR(x, 1.0, 1e-12);
  EXPECT_LT(lc.comp(1).empty() ? 0.0 : std::abs(lc.comp(1)[0]), 1e-14);
}

TEST(ApplyL, SingleModeIsEigenfunction) {
  const GridShape<2> s({16, 12}, {1.0, 1.5});
  const MetricParams p{2.0, 0.5, 3};
  const MetricOperator<2> op(s, p);
  for (auto [ky, kx] : {std::pair{1, 0}, {2, 3}, {8, 6}, {5, 1}}) {
    const auto v = cos_mode(s, ky, kx, 0.8, 1);
    const double lam = std::pow(ell(p, s, ky, kx), p.power);
    EXPECT_LT(rel_err(op.apply_L(v), lam * v), 1e-10);
    EXPECT_LT(rel_err(op.apply_K(v), (1.0 / lam) * v), 1e-10);
  }
}

TEST(ApplyL, PowerOneMatchesDirectStencil) {
  const GridShape<2> s({10, 14}, {0.8, 1.2});
  const MetricParams p{1.7, 0.3, 1};
  const MetricOperator<2> op(s, p);
  const auto v = noise_field(s, 9);
  VectorField<2> ref(s);
  const long ny = 10, nx = 14;
  for (std::size_t c = 0; c < 2; ++c)
    for (long y = 0; y < ny; ++y)
      for (long x = 0; x < nx; ++x) {
        auto at = [&](long yy, long xx) { return v.comp(c)[oracle::wrap(yy, ny) * nx + oracle::wrap(xx, nx)]; };
        const double lap = (at(y + 1, x) - 2 * at(y, x) + at(y - 1, x)) / (0.8 * 0.8) +
                           (at(y, x + 1) - 2 * at(y, x) + at(y, x - 1)) / (1.2 * 1.2);
        ref.comp(c)[y * nx + x] = -p.alpha * lap + p.gamma * at(y, x);
      }
  EXPECT_LT(rel_err(op.apply_L(v), ref), 1e-12);
}

TEST(ApplyK, InvertsL) {
  const GridShape<2> s({32, 32});
  const MetricOperator<2> op(s, MetricParams{});
  const auto v = oracle::smooth_field(s, 2.0, 17, 5);
  EXPECT_LT(rel_err(op.apply_K(op.apply_L(v)), v), 1e-10);
  EXPECT_EQ(op.apply_K(VectorField<2>(s)).max_abs(), 0.0);
}

TEST(ApplyL, LinearAndSelfAdjoint) {
  const GridShape<2> s({16, 16});
  const MetricOperator<2> op(s, MetricParams{});
  for (unsigned seed = 0; seed < 5; ++seed) {
    const auto v = noise_field(s, 2 * seed), w = noise_field(s, 2 * seed + 1);
    auto comb = 1.7 * v;
    axpy(-0.4, w, comb);
    auto expect_l = 1.7 * op.apply_L(v);
    axpy(-0.4, op.apply_L(w), expect_l);
    EXPECT_LT(rel_err(op.apply_L(comb), expect_l), 1e-10);
    auto expect_k = 1.7 * op.apply_K(v);
    axpy(-0.4, op.apply_K(w), expect_k);
    EXPECT_LT(rel_err(op.apply_K(comb), expect_k), 1e-10);
    const double lhs = inner(op.apply_L(v), w), rhs = inner(v, op.apply_L(w));
    EXPECT_LT(std::abs(lhs - rhs), 1e-10 * std::abs(lhs));
  }
}

TEST(ApplyL, ShapeMismatchThrows) {
  const MetricOperator<2> op(GridShape<2>({8, 8}), MetricParams{});
  EXPECT_THROW(op.apply_L(VectorField<2>(GridShape<2>({8, 9}))), ShapeMismatch);
}

TEST(JacobianMatrix, ConstantFieldHasZeroJacobian) {
  const GridShape<2> s({8, 8});
  VectorField<2> v(s);
  std::fill(v.comp(0).begin(), v.comp(0).end(), 2.5);
  const auto j = jacobian_matrix(v);
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 2; ++b)
      for (double x : j(a, b)) EXPECT_EQ(x, 0.0);
}

TEST(JacobianMatrix, SineModeMatchesAnalyticDerivative) {
  const GridShape<2> s({32, 32});
  VectorField<2> v(s);
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) {
    v.comp(0)[lin] = std::sin(2 * kPi * idx[1] / 32.0);
  });
  const auto j = jacobian_matrix(v);
  double err = 0.0;
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) {
    err = std::max(err, std::abs(j(0, 1)[lin] - 2 * kPi / 32.0 * std::cos(2 * kPi * idx[1] / 32.0)));
    err = std::max(err, std::abs(j(0, 0)[lin]));
  });
  EXPECT_LT(err, 0.05);
}

TEST(JacobianMatrix, GradientOfScalarIsSymmetric) {
  const GridShape<2> s({32, 32});
  ScalarImage<2> f(s);
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) {
    f[lin] = std::sin(2 * kPi * (idx[0] + 2.0 * idx[1]) / 32.0) + std::cos(2 * kPi * idx[0] / 32.0);
  });
  const auto j = jacobian_matrix(gradient(f));
  double asym = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    asym = std::max(asym, std::abs(j(0, 1)[i] - j(1, 0)[i]));
    scale = std::max(scale, std::abs(j(0, 1)[i]));
  }
  EXPECT_LT(asym, 1e-12 * std::max(scale, 1.0));
}

TEST(Divergence, ConstantSineAndCurl) {
  const GridShape<2> s({32, 32});
  VectorField<2> c(s);
  std::fill(c.comp(1).begin(), c.comp(1).end(), -1.0);
  for (double x : divergence(c).values()) EXPECT_EQ(x, 0.0);

  VectorField<2> v(s);
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) { v.comp(0)[lin] = std::sin(2 * kPi * idx[0] / 32.0); });
  const auto dv = divergence(v);
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) {
    EXPECT_NEAR(dv[lin], 2 * kPi / 32.0 * std::cos(2 * kPi * idx[0] / 32.0), 0.05 * 2 * kPi / 32.0);
  });

  ScalarImage<2> psi(s);
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) {
    psi[lin] = std::sin(2 * kPi * idx[0] / 32.0) * std::cos(4 * kPi * idx[1] / 32.0);
  });
  const auto g = gradient(psi);
  VectorField<2> curl(s);
  curl.comp(0) = g.comp(1);
  for (std::size_t i = 0; i < s.size(); ++i) curl.comp(0)[i] = -g.comp(1)[i];
  curl.comp(1) = g.comp(0);
  for (double x : divergence(curl).values()) EXPECT_LT(std::abs(x), 1e-10);
}

TEST(SobolevNorm, AnalyticValues) {
  const GridShape<2> s({16, 16});
  const MetricParams p;
  const MetricOperator<2> op(s, p);
  EXPECT_EQ(sobolev_norm_sq(op, VectorField<2>(s)), 0.0);

  VectorField<2> c(s);
  std::fill(c.comp(0).begin(), c.comp(0).end(), 1.0);
  EXPECT_NEAR(sobolev_norm_sq(op, c), std::pow(p.gamma, 2 * p.power), 1e-10);

  const double a = 0.7;
  const auto v = cos_mode(s, 2, 1, a, 0);
  const double l = ell(p, s, 2, 1);
  const double expected = a * a * std::pow(l, 2 * p.power) / 2;
  EXPECT_NEAR(sobolev_norm_sq(op, v), expected, 1e-10 * expected);

  // Direct summation of |Lv|^2 through the analytic eigenvalue.
  double direct = 0.0;
  for (double x : v.comp(0)) direct += std::pow(std::pow(l, p.power) * x, 2);
  direct /= static_cast<double>(s.size());
  EXPECT_NEAR(sobolev_norm_sq(op, v), direct, 1e-10 * direct);
}

TEST(SobolevNorm, LvVVariantUsesLvDotV) {
  const GridShape<2> s({16, 16});
  MetricParams p;
  p.norm = NormVariant::lv_v;
  const MetricOperator<2> op(s, p);
  const auto v = cos_mode(s, 1, 3, 1.3, 1);
  const double expected = 1.3 * 1.3 * std::pow(ell(p, s, 1, 3), p.power) / 2;
  EXPECT_NEAR(sobolev_norm_sq(op, v), expected, 1e-10 * expected);
}

TEST(MetricOperator, ThreeDimensionalRoundTrip) {
  const GridShape<3> s({8, 6, 10});
  const MetricOperator<3> op(s, MetricParams{});
  const auto v = oracle::smooth_field(s, 1.0, 4, 2);
  const auto back = op.apply_K(op.apply_L(v));
  EXPECT_LT(oracle::max_abs_diff(back, v), 1e-10 * v.max_abs());
}
