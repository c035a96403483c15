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

#pragma once

// Sobolev metric L = (-alpha * Lap_h + gamma * I)^c and its inverse K, applied
// as real multipliers in the Fourier domain, plus the finite-difference
// operators used by the EPDiff right-hand side.

#include <fftw3.h>

#include <array>
#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "morphatlas/grid.hpp"

namespace morphatlas {

// lv_lv: |v|_V^2 = <Lv, Lv> (default); lv_v: |v|_V^2 = <Lv, v>.
enum class NormVariant { lv_lv, lv_v };

inline const char* to_string(NormVariant n) { return n == NormVariant::lv_lv ? "lv-lv" : "lv-v"; }

struct MetricParams {
  double alpha = 3.0;
  double gamma = 1.0;
  int power = 3;
  NormVariant norm = NormVariant::lv_lv;

  void validate() const {
    if (!(alpha > 0.0)) throw InvalidConfig("metric alpha must be > 0");
    if (!(gamma > 0.0)) throw InvalidConfig("metric gamma must be > 0");
    if (power < 1) throw InvalidConfig("metric power must be >= 1");
  }
};

namespace detail {

// The FFTW planner is not thread-safe; execution with new arrays is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwDeleter {
  void operator()(void* p) const noexcept { fftw_free(p); }
};

using RealBuffer = std::unique_ptr<double[], FftwDeleter>;
using ComplexBuffer = std::unique_ptr<fftw_complex[], FftwDeleter>;

inline RealBuffer alloc_real(std::size_t n) { return RealBuffer(fftw_alloc_real(n)); }
inline ComplexBuffer alloc_complex(std::size_t n) { return ComplexBuffer(fftw_alloc_complex(n)); }

template <std::size_t D>
class SpectralPlan {
public:
  explicit SpectralPlan(const GridShape<D>& shape) : shape_(shape) {
    std::array<int, D> n{};
    for (std::size_t a = 0; a < D; ++a) n[a] = static_cast<int>(shape.dims[a]);
    auto real = alloc_real(shape.size());
    auto cplx = alloc_complex(half_size());
    std::lock_guard lock(fftw_planner_mutex());
    forward_ = fftw_plan_dft_r2c(static_cast<int>(D), n.data(), real.get(), cplx.get(), FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r(static_cast<int>(D), n.data(), cplx.get(), real.get(), FFTW_ESTIMATE);
    if (!forward_ || !inverse_) throw Error("FFTW failed to plan a transform for grid " + shape.describe());
  }

  ~SpectralPlan() {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
  }

  SpectralPlan(const SpectralPlan&) = delete;
  SpectralPlan& operator=(const SpectralPlan&) = delete;

  std::size_t half_size() const { return shape_.size() / shape_.dims[D - 1] * (shape_.dims[D - 1] / 2 + 1); }

  // out = IFFT(mult * FFT(in)); mult has half_size() entries.
  void filter(std::span<const double> in, std::span<const double> mult, std::span<double> out) const {
    const std::size_t n = shape_.size();
    const std::size_t nh = half_size();
    auto real = alloc_real(n);
    auto cplx = alloc_complex(nh);
    std::copy(in.begin(), in.end(), real.get());
    fftw_execute_dft_r2c(forward_, real.get(), cplx.get());
    const double scale = 1.0 / static_cast<double>(n);
    for (std::size_t k = 0; k < nh; ++k) {
      cplx[k][0] *= mult[k] * scale;
      cplx[k][1] *= mult[k] * scale;
    }
    fftw_execute_dft_c2r(inverse_, cplx.get(), real.get());
    std::copy(real.get(), real.get() + n, out.begin());
  }

private:
  GridShape<D> shape_;
  fftw_plan forward_ = nullptr;
  fftw_plan inverse_ = nullptr;
};

} // namespace detail

// Symmetric positive-definite metric operator on a periodic grid. Cheap to
// copy; the multiplier table and FFT plans are shared and immutable.
template <std::size_t D>
class MetricOperator {
public:
  MetricOperator(const GridShape<D>& shape, const MetricParams& params)
      : shape_(shape), params_(params) {
    params.validate();
    plan_ = std::make_shared<const detail::SpectralPlan<D>>(shape);
    const std::size_t nh = plan_->half_size();
    auto mult = std::make_shared<std::vector<double>>(nh);
    auto inv = std::make_shared<std::vector<double>>(nh);
    // Half-spectrum layout: axes 0..D-2 full, last axis 0..n/2.
    GridShape<D> half = shape;
    half.dims[D - 1] = shape.dims[D - 1] / 2 + 1;
    for_each_voxel(half, [&](const Index<D>& k, std::size_t lin) {
      double ell = params.gamma;
      for (std::size_t a = 0; a < D; ++a) {
        const double h = shape.spacing[a];
        const double theta = 2.0 * std::numbers::pi * static_cast<double>(k[a]) /
                             static_cast<double>(shape.dims[a]);
        ell += 2.0 * params.alpha * (1.0 - std::cos(theta)) / (h * h);
      }
      (*mult)[lin] = std::pow(ell, params.power);
      (*inv)[lin] = 1.0 / (*mult)[lin];
    });
    mult_ = std::move(mult);
    inv_mult_ = std::move(inv);
  }

  const GridShape<D>& shape() const { return shape_; }
  const MetricParams& params() const { return params_; }

  // Per-frequency multipliers of L on the half spectrum.
  std::span<const double> multipliers() const { return *mult_; }

  VectorField<D> apply_L(const VectorField<D>& v) const { return filter(v, *mult_, "apply_L"); }
  VectorField<D> apply_K(const VectorField<D>& m) const { return filter(m, *inv_mult_, "apply_K"); }

  // Riesz map of the configured norm and its inverse: L^2 / K^2 under
  // lv_lv, L / K under lv_v.
  VectorField<D> apply_riesz(const VectorField<D>& v) const {
    return params_.norm == NormVariant::lv_lv ? apply_L(apply_L(v)) : apply_L(v);
  }
  VectorField<D> apply_riesz_inverse(const VectorField<D>& m) const {
    return params_.norm == NormVariant::lv_lv ? apply_K(apply_K(m)) : apply_K(m);
  }

private:
  VectorField<D> filter(const VectorField<D>& v, const std::vector<double>& mult, const char* op) const {
    require_same_shape(v, *this, op);
    VectorField<D> out(shape_);
    for (std::size_t a = 0; a < D; ++a) plan_->filter(v.comp(a), mult, out.comp(a));
    return out;
  }

  GridShape<D> shape_;
  MetricParams params_;
  std::shared_ptr<const detail::SpectralPlan<D>> plan_;
  std::shared_ptr<const std::vector<double>> mult_;
  std::shared_ptr<const std::vector<double>> inv_mult_;
};

template <std::size_t D>
VectorField<D> apply_L(const MetricOperator<D>& op, const VectorField<D>& v) {
  return op.apply_L(v);
}

template <std::size_t D>
VectorField<D> apply_K(const MetricOperator<D>& op, const VectorField<D>& m) {
  return op.apply_K(m);
}

// Per-voxel d x d matrices, entry (i, j) = d v_i / d x_j, stored as planes.
template <std::size_t D>
struct JacobianField {
  GridShape<D> shape;
  std::array<std::array<std::vector<double>, D>, D> entries;

  const std::vector<double>& operator()(std::size_t i, std::size_t j) const { return entries[i][j]; }
};

template <std::size_t D>
JacobianField<D> jacobian_matrix(const VectorField<D>& v) {
  JacobianField<D> jac{v.shape(), {}};
  for (std::size_t i = 0; i < D; ++i)
    for (std::size_t j = 0; j < D; ++j) {
      jac.entries[i][j].resize(v.size());
      central_difference<D>(v.shape(), v.comp(i), j, jac.entries[i][j]);
    }
  return jac;
}

template <std::size_t D>
ScalarImage<D> divergence(const VectorField<D>& v) {
  ScalarImage<D> out(v.shape());
  std::vector<double> d(v.size());
  for (std::size_t a = 0; a < D; ++a) {
    central_difference<D>(v.shape(), v.comp(a), a, d);
    for (std::size_t i = 0; i < d.size(); ++i) out[i] += d[i];
  }
  return out;
}

// Grid inner product, normalized by voxel count. Summation is sequential.
template <std::size_t D>
double inner(const VectorField<D>& a, const VectorField<D>& b) {
  require_same_shape(a, b, "inner");
  double s = 0.0;
  for (std::size_t c = 0; c < D; ++c)
    for (std::size_t i = 0; i < a.size(); ++i) s += a.comp(c)[i] * b.comp(c)[i];
  return s / static_cast<double>(a.size());
}

template <std::size_t D>
double sobolev_norm_sq(const MetricOperator<D>& op, const VectorField<D>& v) {
  const VectorField<D> lv = op.apply_L(v);
  return op.params().norm == NormVariant::lv_lv ? inner(lv, lv) : inner(lv, v);
}

} // namespace morphatlas
