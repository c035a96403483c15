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

// Diffeomorphisms generated from velocity fields: EPDiff geodesic shooting
// and the stationary-velocity exponential (scaling and squaring).

#include <atomic>
#include <spdlog/spdlog.h>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "morphatlas/grid.hpp"
#include "morphatlas/spectral.hpp"

namespace morphatlas {

enum class Scheme { euler, rk4 };
enum class Parameterization { geodesic, stationary };

inline const char* to_string(Scheme s) { return s == Scheme::euler ? "euler" : "rk4"; }
inline const char* to_string(Parameterization p) {
  return p == Parameterization::geodesic ? "geodesic" : "stationary";
}

struct IntegrationConfig {
  int num_steps = 10;
  Scheme scheme = Scheme::rk4;
  Parameterization parameterization = Parameterization::geodesic;
  int squarings = 6;

  void validate() const {
    if (num_steps < 1) throw InvalidConfig("num_steps must be >= 1");
    if (squarings < 1 || squarings > 12) throw InvalidConfig("squarings must lie in [1, 12]");
  }
};

// Velocities above this many voxels per unit time are flagged.
inline constexpr double kVelocityWarnBound = 4.0;

// dv/dt = -K[(Dv)^T m + (Dm) v + m div v], m = L v.
template <std::size_t D>
VectorField<D> epdiff_rhs(const MetricOperator<D>& op, const VectorField<D>& v) {
  require_same_shape(v, op, "epdiff_rhs");
  const VectorField<D> m = op.apply_L(v);
  const auto dv = jacobian_matrix(v);
  const auto dm = jacobian_matrix(m);
  const auto div = divergence(v);
  VectorField<D> bracket(v.shape());
  for (std::size_t x = 0; x < v.size(); ++x) {
    for (std::size_t i = 0; i < D; ++i) {
      double s = m.comp(i)[x] * div[x];
      for (std::size_t j = 0; j < D; ++j) s += dv(j, i)[x] * m.comp(j)[x] + dm(i, j)[x] * v.comp(j)[x];
      bracket.comp(i)[x] = s;
    }
  }
  VectorField<D> out = op.apply_K(bracket);
  out *= -1.0;
  return out;
}

// Time derivative of the displacement u of a map transported by v:
// d psi/dt = -(D psi) v, i.e. du/dt = -v - (Du) v.
template <std::size_t D>
VectorField<D> transport_rhs(const VectorField<D>& u, const VectorField<D>& v) {
  const auto du = jacobian_matrix(u);
  VectorField<D> out(u.shape());
  for (std::size_t x = 0; x < u.size(); ++x)
    for (std::size_t i = 0; i < D; ++i) {
      double s = v.comp(i)[x];
      for (std::size_t j = 0; j < D; ++j) s += du(i, j)[x] * v.comp(j)[x];
      out.comp(i)[x] = -s;
    }
  return out;
}

// Velocities and inverse-map displacements at every time node.
template <std::size_t D>
struct ShootTrajectory {
  std::vector<VectorField<D>> velocities;
  std::vector<VectorField<D>> inverse_maps;
};

template <std::size_t D>
struct ShootResult {
  DeformationPair<D> maps;
  VectorField<D> final_velocity;
  std::optional<ShootTrajectory<D>> trajectory;
};

namespace detail {

template <std::size_t D>
struct FlowState {
  VectorField<D> velocity;
  VectorField<D> displacement;
};

template <std::size_t D>
void check_map(const VectorField<D>& disp, const std::string& where) {
  const double jmin = min_value(jacobian_determinant(disp));
  if (!(jmin > 0.0))
    throw DiffeomorphismViolation("nonpositive Jacobian determinant (min " + std::to_string(jmin) + ") " + where);
}

// Integrates EPDiff coupled with transport of a map displacement over unit
// time. direction = -1 runs the same equations backward from t = 1.
template <std::size_t D>
FlowState<D> integrate_coupled(const MetricOperator<D>& op, FlowState<D> s, const IntegrationConfig& cfg,
                               double direction, ShootTrajectory<D>* traj, const char* label) {
  const double h = direction / cfg.num_steps;
  if (traj) {
    traj->velocities.push_back(s.velocity);
    traj->inverse_maps.push_back(s.displacement);
  }
  for (int step = 1; step <= cfg.num_steps; ++step) {
    if (cfg.scheme == Scheme::euler) {
      const auto kv = epdiff_rhs(op, s.velocity);
      const auto ku = transport_rhs(s.displacement, s.velocity);
      axpy(h, kv, s.velocity);
      axpy(h, ku, s.displacement);
    } else {
      const auto& v0 = s.velocity;
      const auto& u0 = s.displacement;
      const auto kv1 = epdiff_rhs(op, v0);
      const auto ku1 = transport_rhs(u0, v0);
      auto v = v0, u = u0;
      axpy(0.5 * h, kv1, v);
      axpy(0.5 * h, ku1, u);
      const auto kv2 = epdiff_rhs(op, v);
      const auto ku2 = transport_rhs(u, v);
      v = v0, u = u0;
      axpy(0.5 * h, kv2, v);
      axpy(0.5 * h, ku2, u);
      const auto kv3 = epdiff_rhs(op, v);
      const auto ku3 = transport_rhs(u, v);
      v = v0, u = u0;
      axpy(h, kv3, v);
      axpy(h, ku3, u);
      const auto kv4 = epdiff_rhs(op, v);
      const auto ku4 = transport_rhs(u, v);
      const double w = h / 6.0;
      axpy(w, kv1, s.velocity);
      axpy(2 * w, kv2, s.velocity);
      axpy(2 * w, kv3, s.velocity);
      axpy(w, kv4, s.velocity);
      axpy(w, ku1, s.displacement);
      axpy(2 * w, ku2, s.displacement);
      axpy(2 * w, ku3, s.displacement);
      axpy(w, ku4, s.displacement);
    }
    check_map(s.displacement, std::string("in ") + label + " at integration step " + std::to_string(step) +
                                  " of " + std::to_string(cfg.num_steps));
    if (traj) {
      traj->velocities.push_back(s.velocity);
      traj->inverse_maps.push_back(s.displacement);
    }
  }
  return s;
}

inline std::atomic<int> velocity_warnings{0};
inline constexpr int kMaxVelocityWarnings = 5;

template <std::size_t D>
void warn_velocity(const VectorField<D>& v) {
  const double vmax = v.max_norm();
  if (!(vmax > kVelocityWarnBound)) return;
  const int n = velocity_warnings.fetch_add(1);
  if (n < kMaxVelocityWarnings)
    spdlog::warn("velocity magnitude {:.3f} voxels exceeds the safe bound of {} voxels per unit time", vmax,
                 kVelocityWarnBound);
  if (n + 1 == kMaxVelocityWarnings) spdlog::warn("further velocity warnings suppressed");
}

} // namespace detail

// Displacement of phi_1^{-1} for the geodesic with initial velocity v0.
template <std::size_t D>
VectorField<D> shoot_inverse(const MetricOperator<D>& op, const VectorField<D>& v0, const IntegrationConfig& cfg) {
  cfg.validate();
  require_same_shape(v0, op, "geodesic_shoot");
  detail::warn_velocity(v0);
  auto s = detail::integrate_coupled(op, detail::FlowState<D>{v0, VectorField<D>(v0.shape())}, cfg, 1.0,
                                     static_cast<ShootTrajectory<D>*>(nullptr), "inverse-map transport");
  return std::move(s.displacement);
}

// Shoots v0 along EPDiff. The inverse map is transported forward in time;
// the forward map phi_1 = eta_0 comes from transporting eta_t = phi_1 o phi_t^{-1}
// backward from eta_1 = id, re-integrating EPDiff in reverse from v_1.
template <std::size_t D>
ShootResult<D> geodesic_shoot(const MetricOperator<D>& op, const VectorField<D>& v0, const IntegrationConfig& cfg,
                              bool keep_trajectory = false) {
  cfg.validate();
  require_same_shape(v0, op, "geodesic_shoot");
  detail::warn_velocity(v0);
  ShootResult<D> result;
  ShootTrajectory<D> traj;
  auto fwd = detail::integrate_coupled(op, detail::FlowState<D>{v0, VectorField<D>(v0.shape())}, cfg, 1.0,
                                       keep_trajectory ? &traj : nullptr, "inverse-map transport");
  auto bwd = detail::integrate_coupled(op, detail::FlowState<D>{fwd.velocity, VectorField<D>(v0.shape())}, cfg,
                                       -1.0, static_cast<ShootTrajectory<D>*>(nullptr), "forward-map transport");
  result.maps.forward = std::move(bwd.displacement);
  result.maps.inverse = std::move(fwd.displacement);
  result.maps.jac_det_forward = jacobian_determinant(result.maps.forward);
  if (!(min_value(result.maps.jac_det_forward) > 0.0))
    throw DiffeomorphismViolation("nonpositive Jacobian determinant in the final forward map");
  result.final_velocity = std::move(fwd.velocity);
  if (keep_trajectory) result.trajectory = std::move(traj);
  return result;
}

// max |m_1 - |D psi|(D psi)^T (m_0 o psi)| / max |m_0| at t = 1, psi = phi_1^{-1}.
template <std::size_t D>
double momentum_conservation_residual(const MetricOperator<D>& op, const ShootTrajectory<D>& traj) {
  if (traj.velocities.size() < 2 || traj.inverse_maps.size() != traj.velocities.size())
    throw Error("momentum_conservation_residual: trajectory intermediates were not retained");
  const VectorField<D> m0 = op.apply_L(traj.velocities.front());
  const VectorField<D> m1 = op.apply_L(traj.velocities.back());
  const VectorField<D>& psi = traj.inverse_maps.back();
  const auto dpsi = jacobian_matrix(psi);
  const double scale = m0.max_abs();
  double worst = 0.0;
  for_each_voxel(psi.shape(), [&](const Index<D>& idx, std::size_t x) {
    Point<D> p = to_point(idx);
    for (std::size_t a = 0; a < D; ++a) p[a] += psi.comp(a)[x];
    const Point<D> m0_at = sample(m0, p);
    std::array<std::array<double, D>, D> jm{};
    for (std::size_t i = 0; i < D; ++i)
      for (std::size_t j = 0; j < D; ++j) jm[i][j] = (i == j ? 1.0 : 0.0) + dpsi(i, j)[x];
    const double det = determinant<D>(jm);
    for (std::size_t i = 0; i < D; ++i) {
      double t = 0.0;
      for (std::size_t j = 0; j < D; ++j) t += jm[j][i] * m0_at[j];
      worst = std::max(worst, std::abs(m1.comp(i)[x] - det * t));
    }
  });
  if (scale == 0.0) return worst;
  return worst / scale;
}

// exp(w) by scaling and squaring: u = w / 2^s, then s self-compositions.
template <std::size_t D>
VectorField<D> exp_displacement(const VectorField<D>& w, int squarings) {
  VectorField<D> u = std::ldexp(1.0, -squarings) * w;
  for (int k = 0; k < squarings; ++k) u = compose_maps(u, u);
  return u;
}

template <std::size_t D>
DeformationPair<D> svf_exponential(const VectorField<D>& w, const IntegrationConfig& cfg) {
  cfg.validate();
  detail::warn_velocity(w);
  DeformationPair<D> pair;
  pair.forward = exp_displacement(w, cfg.squarings);
  pair.inverse = exp_displacement(-1.0 * w, cfg.squarings);
  pair.jac_det_forward = jacobian_determinant(pair.forward);
  if (!(min_value(pair.jac_det_forward) > 0.0))
    throw DiffeomorphismViolation("nonpositive Jacobian determinant in the stationary exponential");
  detail::check_map(pair.inverse, "in the inverse stationary exponential");
  return pair;
}

// Forward/inverse maps for v under the configured parameterization.
template <std::size_t D>
DeformationPair<D> flow_maps(const MetricOperator<D>& op, const VectorField<D>& v, const IntegrationConfig& cfg) {
  if (cfg.parameterization == Parameterization::stationary) return svf_exponential(v, cfg);
  return geodesic_shoot(op, v, cfg).maps;
}

// Displacement of phi^{-1} only.
template <std::size_t D>
VectorField<D> inverse_map(const MetricOperator<D>& op, const VectorField<D>& v, const IntegrationConfig& cfg) {
  if (cfg.parameterization == Parameterization::stationary) {
    cfg.validate();
    detail::warn_velocity(v);
    auto inv = exp_displacement(-1.0 * v, cfg.squarings);
    detail::check_map(inv, "in the inverse stationary exponential");
    return inv;
  }
  return shoot_inverse(op, v, cfg);
}

} // namespace morphatlas
