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

// Dense containers on a periodic grid (torus) plus the sampling operations
// built on them. All storage is row-major with the last axis fastest.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "morphatlas/errors.hpp"

namespace morphatlas {

template <std::size_t D>
using Point = std::array<double, D>;

template <std::size_t D>
using Index = std::array<std::size_t, D>;

template <std::size_t D>
struct GridShape {
  static_assert(D == 2 || D == 3, "only 2D and 3D grids are supported");

  Index<D> dims{};
  std::array<double, D> spacing{};

  GridShape() { spacing.fill(1.0); }

  explicit GridShape(const Index<D>& d) : dims(d) {
    spacing.fill(1.0);
    validate();
  }

  GridShape(const Index<D>& d, const std::array<double, D>& h) : dims(d), spacing(h) { validate(); }

  void validate() const {
    for (std::size_t a = 0; a < D; ++a) {
      if (dims[a] < 4)
        throw InvalidConfig("grid axis " + std::to_string(a) + " has " + std::to_string(dims[a]) +
                            " points; at least 4 are required");
      if (!(spacing[a] > 0.0) || !std::isfinite(spacing[a]))
        throw InvalidConfig("grid spacing along axis " + std::to_string(a) + " must be positive");
    }
  }

  std::size_t size() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
  }

  Index<D> strides() const {
    Index<D> s{};
    s[D - 1] = 1;
    for (std::size_t a = D - 1; a > 0; --a) s[a - 1] = s[a] * dims[a];
    return s;
  }

  std::size_t linear(const Index<D>& idx) const {
    std::size_t lin = 0;
    for (std::size_t a = 0; a < D; ++a) lin = lin * dims[a] + idx[a];
    return lin;
  }

  Index<D> unravel(std::size_t lin) const {
    Index<D> idx{};
    for (std::size_t a = D; a-- > 0;) {
      idx[a] = lin % dims[a];
      lin /= dims[a];
    }
    return idx;
  }

  std::string describe() const {
    std::string s;
    for (std::size_t a = 0; a < D; ++a) s += (a ? "x" : "") + std::to_string(dims[a]);
    return s;
  }

  bool operator==(const GridShape&) const = default;
};

// Calls fn(index, linear) for every grid point in storage order.
template <std::size_t D, class F>
void for_each_voxel(const GridShape<D>& shape, F&& fn) {
  Index<D> idx{};
  const std::size_t n = shape.size();
  for (std::size_t lin = 0; lin < n; ++lin) {
    fn(static_cast<const Index<D>&>(idx), lin);
    for (std::size_t a = D; a-- > 0;) {
      if (++idx[a] < shape.dims[a]) break;
      idx[a] = 0;
    }
  }
}

inline std::size_t wrap_index(std::ptrdiff_t i, std::size_t n) {
  const auto m = static_cast<std::ptrdiff_t>(n);
  std::ptrdiff_t r = i % m;
  return static_cast<std::size_t>(r < 0 ? r + m : r);
}

template <std::size_t D>
class ScalarImage {
public:
  ScalarImage() = default;

  explicit ScalarImage(const GridShape<D>& shape, double fill = 0.0)
      : shape_(shape), values_(shape.size(), fill) {}

  ScalarImage(const GridShape<D>& shape, std::vector<double> values)
      : shape_(shape), values_(std::move(values)) {
    if (values_.size() != shape_.size())
      throw ShapeMismatch("image has " + std::to_string(values_.size()) + " values, grid " +
                          shape_.describe() + " needs " + std::to_string(shape_.size()));
  }

  const GridShape<D>& shape() const { return shape_; }
  std::size_t size() const { return values_.size(); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(const Index<D>& idx) { return values_[shape_.linear(idx)]; }
  double at(const Index<D>& idx) const { return values_[shape_.linear(idx)]; }

  std::span<double> values() & { return values_; }
  std::span<const double> values() const& { return values_; }
  // Temporaries hand over their storage so range-for over them stays valid.
  std::vector<double> values() && { return std::move(values_); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double x) { return std::isfinite(x); });
  }

  bool operator==(const ScalarImage&) const = default;

private:
  GridShape<D> shape_;
  std::vector<double> values_;
};

// D components stored as separate planes (component-major).
template <std::size_t D>
class VectorField {
public:
  VectorField() = default;

  explicit VectorField(const GridShape<D>& shape) : shape_(shape) {
    for (auto& c : comps_) c.assign(shape.size(), 0.0);
  }

  VectorField(const GridShape<D>& shape, std::array<std::vector<double>, D> comps)
      : shape_(shape), comps_(std::move(comps)) {
    for (std::size_t a = 0; a < D; ++a)
      if (comps_[a].size() != shape_.size())
        throw ShapeMismatch("vector component " + std::to_string(a) + " has " +
                            std::to_string(comps_[a].size()) + " values, grid " + shape_.describe() +
                            " needs " + std::to_string(shape_.size()));
  }

  const GridShape<D>& shape() const { return shape_; }
  std::size_t size() const { return shape_.size(); }

  std::vector<double>& comp(std::size_t a) { return comps_[a]; }
  const std::vector<double>& comp(std::size_t a) const { return comps_[a]; }

  Point<D> at(std::size_t lin) const {
    Point<D> p{};
    for (std::size_t a = 0; a < D; ++a) p[a] = comps_[a][lin];
    return p;
  }

  void set(std::size_t lin, const Point<D>& p) {
    for (std::size_t a = 0; a < D; ++a) comps_[a][lin] = p[a];
  }

  // Largest Euclidean vector length over the grid.
  double max_norm() const {
    double best = 0.0;
    for (std::size_t i = 0; i < size(); ++i) {
      double s = 0.0;
      for (std::size_t a = 0; a < D; ++a) s += comps_[a][i] * comps_[a][i];
      best = std::max(best, s);
    }
    return std::sqrt(best);
  }

  // Largest absolute component value.
  double max_abs() const {
    double best = 0.0;
    for (const auto& c : comps_)
      for (double x : c) best = std::max(best, std::abs(x));
    return best;
  }

  bool all_finite() const {
    for (const auto& c : comps_)
      for (double x : c)
        if (!std::isfinite(x)) return false;
    return true;
  }

  VectorField& operator+=(const VectorField& o) {
    for (std::size_t a = 0; a < D; ++a)
      for (std::size_t i = 0; i < size(); ++i) comps_[a][i] += o.comps_[a][i];
    return *this;
  }

  VectorField& operator*=(double s) {
    for (auto& c : comps_)
      for (double& x : c) x *= s;
    return *this;
  }

  bool operator==(const VectorField&) const = default;

private:
  GridShape<D> shape_;
  std::array<std::vector<double>, D> comps_;
};

template <std::size_t D>
VectorField<D> operator*(double s, VectorField<D> v) {
  v *= s;
  return v;
}

// y += s * x
template <std::size_t D>
void axpy(double s, const VectorField<D>& x, VectorField<D>& y) {
  for (std::size_t a = 0; a < D; ++a) {
    auto& yc = y.comp(a);
    const auto& xc = x.comp(a);
    for (std::size_t i = 0; i < yc.size(); ++i) yc[i] += s * xc[i];
  }
}

// Maps are stored as displacements in voxel units: phi(x) = x + u(x).
template <std::size_t D>
struct DeformationPair {
  VectorField<D> forward;
  VectorField<D> inverse;
  ScalarImage<D> jac_det_forward;

  static DeformationPair identity(const GridShape<D>& shape) {
    return {VectorField<D>(shape), VectorField<D>(shape), ScalarImage<D>(shape, 1.0)};
  }
};

template <class A, class B>
void require_same_shape(const A& a, const B& b, const char* op) {
  if (!(a.shape() == b.shape()))
    throw ShapeMismatch(std::string(op) + ": shape " + a.shape().describe() + " does not match " +
                        b.shape().describe());
}

namespace detail {

template <std::size_t D>
struct Stencil {
  std::array<std::size_t, (1u << D)> offsets{};
  std::array<double, (1u << D)> weights{};
};

// Multilinear weights for the 2^D cell corners around p, with periodic wrap.
template <std::size_t D>
inline Stencil<D> multilinear_stencil(const GridShape<D>& shape, const Point<D>& p) {
  std::array<std::size_t, D> lo{}, hi{};
  std::array<double, D> frac{};
  for (std::size_t a = 0; a < D; ++a) {
    const double fl = std::floor(p[a]);
    frac[a] = p[a] - fl;
    const auto i = static_cast<std::ptrdiff_t>(fl);
    lo[a] = wrap_index(i, shape.dims[a]);
    hi[a] = lo[a] + 1 == shape.dims[a] ? 0 : lo[a] + 1;
  }
  const auto strides = shape.strides();
  Stencil<D> st;
  for (std::size_t corner = 0; corner < (1u << D); ++corner) {
    std::size_t off = 0;
    double w = 1.0;
    for (std::size_t a = 0; a < D; ++a) {
      const bool up = (corner >> (D - 1 - a)) & 1u;
      off += (up ? hi[a] : lo[a]) * strides[a];
      w *= up ? frac[a] : 1.0 - frac[a];
    }
    st.offsets[corner] = off;
    st.weights[corner] = w;
  }
  return st;
}

} // namespace detail

// Multilinear sample of img at continuous grid coordinate p (periodic).
template <std::size_t D>
double sample(const ScalarImage<D>& img, const Point<D>& p) {
  const auto st = detail::multilinear_stencil(img.shape(), p);
  double v = 0.0;
  for (std::size_t c = 0; c < st.offsets.size(); ++c) v += st.weights[c] * img[st.offsets[c]];
  return v;
}

template <std::size_t D>
Point<D> sample(const VectorField<D>& field, const Point<D>& p) {
  const auto st = detail::multilinear_stencil(field.shape(), p);
  Point<D> out{};
  for (std::size_t a = 0; a < D; ++a) {
    const auto& comp = field.comp(a);
    double v = 0.0;
    for (std::size_t c = 0; c < st.offsets.size(); ++c) v += st.weights[c] * comp[st.offsets[c]];
    out[a] = v;
  }
  return out;
}

// Samples img at the absolute coordinates held in `coords`; the result lives
// on coords' grid.
template <std::size_t D>
ScalarImage<D> interpolate(const ScalarImage<D>& img, const VectorField<D>& coords) {
  ScalarImage<D> out(coords.shape());
  for (std::size_t i = 0; i < coords.size(); ++i) out[i] = sample(img, coords.at(i));
  return out;
}

template <std::size_t D>
ScalarImage<D> interpolate(const ScalarImage<D>& img, std::span<const Point<D>> points,
                           const GridShape<D>& out_shape) {
  if (points.size() != out_shape.size())
    throw ShapeMismatch("interpolate: " + std::to_string(points.size()) + " query points for grid " +
                        out_shape.describe());
  ScalarImage<D> out(out_shape);
  for (std::size_t i = 0; i < points.size(); ++i) out[i] = sample(img, points[i]);
  return out;
}

template <std::size_t D>
Point<D> to_point(const Index<D>& idx) {
  Point<D> p{};
  for (std::size_t a = 0; a < D; ++a) p[a] = static_cast<double>(idx[a]);
  return p;
}

// img o phi with phi(x) = x + u(x).
template <std::size_t D>
ScalarImage<D> warp_image(const ScalarImage<D>& img, const VectorField<D>& map_disp) {
  require_same_shape(img, map_disp, "warp_image");
  ScalarImage<D> out(img.shape());
  for_each_voxel(img.shape(), [&](const Index<D>& idx, std::size_t lin) {
    Point<D> p = to_point(idx);
    for (std::size_t a = 0; a < D; ++a) p[a] += map_disp.comp(a)[lin];
    out[lin] = sample(img, p);
  });
  return out;
}

// Displacement of phi_outer o phi_inner.
template <std::size_t D>
VectorField<D> compose_maps(const VectorField<D>& outer_disp, const VectorField<D>& inner_disp) {
  require_same_shape(outer_disp, inner_disp, "compose_maps");
  VectorField<D> out(inner_disp.shape());
  for_each_voxel(inner_disp.shape(), [&](const Index<D>& idx, std::size_t lin) {
    Point<D> p = to_point(idx);
    const Point<D> inner = inner_disp.at(lin);
    for (std::size_t a = 0; a < D; ++a) p[a] += inner[a];
    const Point<D> outer = sample(outer_disp, p);
    for (std::size_t a = 0; a < D; ++a) out.comp(a)[lin] = inner[a] + outer[a];
  });
  return out;
}

template <std::size_t D>
double determinant(const std::array<std::array<double, D>, D>& m) {
  if constexpr (D == 2) {
    return m[0][0] * m[1][1] - m[0][1] * m[1][0];
  } else {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
           m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  }
}

// Central difference of a scalar plane along `axis`, periodic, in voxel units.
template <std::size_t D>
void central_difference(const GridShape<D>& shape, std::span<const double> f, std::size_t axis,
                        std::span<double> out) {
  const auto strides = shape.strides();
  const std::size_t n = shape.dims[axis];
  const std::size_t s = strides[axis];
  for_each_voxel(shape, [&](const Index<D>& idx, std::size_t lin) {
    const std::size_t i = idx[axis];
    const std::size_t plus = i + 1 == n ? lin - i * s : lin + s;
    const std::size_t minus = i == 0 ? lin + (n - 1) * s : lin - s;
    out[lin] = 0.5 * (f[plus] - f[minus]);
  });
}

template <std::size_t D>
VectorField<D> gradient(const ScalarImage<D>& img) {
  VectorField<D> g(img.shape());
  for (std::size_t a = 0; a < D; ++a) central_difference<D>(img.shape(), img.values(), a, g.comp(a));
  return g;
}

// det(I + Du) per voxel, central differences with periodic wrap.
template <std::size_t D>
ScalarImage<D> jacobian_determinant(const VectorField<D>& map_disp) {
  const auto& shape = map_disp.shape();
  // du[i][j] = d u_i / d x_j
  std::array<std::array<std::vector<double>, D>, D> du;
  for (std::size_t i = 0; i < D; ++i)
    for (std::size_t j = 0; j < D; ++j) {
      du[i][j].resize(shape.size());
      central_difference<D>(shape, map_disp.comp(i), j, du[i][j]);
    }
  ScalarImage<D> out(shape);
  for (std::size_t lin = 0; lin < shape.size(); ++lin) {
    std::array<std::array<double, D>, D> m{};
    for (std::size_t i = 0; i < D; ++i)
      for (std::size_t j = 0; j < D; ++j) m[i][j] = (i == j ? 1.0 : 0.0) + du[i][j][lin];
    out[lin] = determinant<D>(m);
  }
  return out;
}

template <std::size_t D>
double min_value(const ScalarImage<D>& img) {
  return *std::min_element(img.values().begin(), img.values().end());
}

template <std::size_t D>
double mean_value(const ScalarImage<D>& img) {
  double s = 0.0;
  for (double x : img.values()) s += x;
  return s / static_cast<double>(img.size());
}

} // namespace morphatlas
