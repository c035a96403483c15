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

// Sum-of-squared-differences registration energy, NCC, and a greedy
// gradient-descent registration used as the built-in velocity predictor.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "morphatlas/geodesic.hpp"
#include "morphatlas/grid.hpp"
#include "morphatlas/spectral.hpp"

namespace morphatlas {

struct RegistrationConfig {
  double sigma = 0.02;
  double step_size = 0.02;
  int max_iters = 200;
  double tol = 1e-4;
  // Consecutive energy increases tolerated before giving up.
  int divergence_patience = 10;
  IntegrationConfig integration;
  MetricParams metric;

  void validate() const {
    if (!(sigma > 0.0)) throw InvalidConfig("sigma must be > 0");
    if (!(step_size >= 0.0)) throw InvalidConfig("step_size must be >= 0");
    if (max_iters < 1) throw InvalidConfig("max_iters must be >= 1");
    if (!(tol >= 0.0)) throw InvalidConfig("tol must be >= 0");
    integration.validate();
    metric.validate();
  }
};

struct EnergyBreakdown {
  double data = 0.0;
  double reg = 0.0;
  double total = 0.0;
};

// (1 / 2 sigma^2) * mean squared difference.
template <std::size_t D>
double data_term(const ScalarImage<D>& warped, const ScalarImage<D>& target, double sigma) {
  require_same_shape(warped, target, "data_term");
  double s = 0.0;
  for (std::size_t i = 0; i < warped.size(); ++i) {
    const double r = warped[i] - target[i];
    s += r * r;
  }
  return s / static_cast<double>(warped.size()) / (2.0 * sigma * sigma);
}

template <std::size_t D>
EnergyBreakdown energy_with_map(const MetricOperator<D>& op, const ScalarImage<D>& source, const ScalarImage<D>& target,
                                const VectorField<D>& v, const VectorField<D>& inverse_disp, double sigma) {
  EnergyBreakdown e;
  e.data = data_term(warp_image(source, inverse_disp), target, sigma);
  e.reg = 0.5 * sobolev_norm_sq(op, v);
  e.total = e.data + e.reg;
  return e;
}

template <std::size_t D>
EnergyBreakdown registration_energy(const MetricOperator<D>& op, const ScalarImage<D>& source,
                                    const ScalarImage<D>& target, const VectorField<D>& v0,
                                    const RegistrationConfig& cfg) {
  require_same_shape(source, target, "registration_energy");
  require_same_shape(source, v0, "registration_energy");
  return energy_with_map(op, source, target, v0, inverse_map(op, v0, cfg.integration), cfg.sigma);
}

template <std::size_t D>
EnergyBreakdown registration_energy(const ScalarImage<D>& source, const ScalarImage<D>& target,
                                    const VectorField<D>& v0, const RegistrationConfig& cfg) {
  cfg.validate();
  return registration_energy(MetricOperator<D>(source.shape(), cfg.metric), source, target, v0, cfg);
}

// sigma^-2 (J - T) grad J: the negative L2 gradient of the data term with
// respect to the velocity, linearized around the current warp J = S o phi^-1
// (phi^-1 ~ x - v for a small update).
template <std::size_t D>
VectorField<D> data_force(const ScalarImage<D>& warped, const ScalarImage<D>& target, double sigma) {
  require_same_shape(warped, target, "data_force");
  VectorField<D> f = gradient(warped);
  const double w = 1.0 / (sigma * sigma);
  for (std::size_t i = 0; i < warped.size(); ++i) {
    const double r = w * (warped[i] - target[i]);
    for (std::size_t a = 0; a < D; ++a) f.comp(a)[i] *= r;
  }
  return f;
}

// Global Pearson correlation.
template <std::size_t D>
double ncc(const ScalarImage<D>& a, const ScalarImage<D>& b) {
  require_same_shape(a, b, "ncc");
  const double ma = mean_value(a), mb = mean_value(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (!(saa > 0.0) || !(sbb > 0.0)) throw UndefinedCorrelation("ncc: input image has zero variance");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

template <std::size_t D>
struct RegistrationResult {
  VectorField<D> velocity;
  EnergyBreakdown energy;
  EnergyBreakdown initial;
  std::vector<double> trace;
  int iterations = 0;
  bool converged = false;
};

// Greedy registration of source onto target: v <- v - step * (v - R^-1 f),
// with f the data force and R the Riesz map of the configured norm. Returns
// the best iterate seen, so the result never scores worse than v = 0.
template <std::size_t D>
RegistrationResult<D> oracle_register_detailed(const MetricOperator<D>& op, const ScalarImage<D>& source,
                                               const ScalarImage<D>& target, const RegistrationConfig& cfg) {
  cfg.validate();
  require_same_shape(source, target, "oracle_register");
  require_same_shape(source, op, "oracle_register");

  RegistrationResult<D> res;
  VectorField<D> v(source.shape());
  VectorField<D> inv(source.shape());
  ScalarImage<D> warped = source;
  EnergyBreakdown e = energy_with_map(op, source, target, v, inv, cfg.sigma);
  res.initial = e;
  res.energy = e;
  res.velocity = v;
  res.trace.push_back(e.total);

  int rising = 0;
  for (int it = 1; it <= cfg.max_iters; ++it) {
    const VectorField<D> smoothed = op.apply_riesz_inverse(data_force(warped, target, cfg.sigma));
    VectorField<D> step_dir = v;
    axpy(-1.0, smoothed, step_dir);
    axpy(-cfg.step_size, step_dir, v);

    inv = inverse_map(op, v, cfg.integration);
    warped = warp_image(source, inv);
    const double prev = e.total;
    e.data = data_term(warped, target, cfg.sigma);
    e.reg = 0.5 * sobolev_norm_sq(op, v);
    e.total = e.data + e.reg;
    res.trace.push_back(e.total);
    res.iterations = it;

    if (e.total < res.energy.total) {
      res.energy = e;
      res.velocity = v;
    }
    rising = e.total > prev ? rising + 1 : 0;
    if (rising >= cfg.divergence_patience)
      throw NonConvergence("oracle registration diverged: energy rose for " + std::to_string(rising) +
                               " consecutive iterations",
                           res.trace);
    const double rel = std::abs(e.total - prev) / std::max(std::abs(prev), std::numeric_limits<double>::min());
    if (rel < cfg.tol) {
      res.converged = true;
      break;
    }
  }
  return res;
}

template <std::size_t D>
VectorField<D> oracle_register(const ScalarImage<D>& source, const ScalarImage<D>& target,
                               const RegistrationConfig& cfg) {
  cfg.validate();
  const MetricOperator<D> op(source.shape(), cfg.metric);
  return oracle_register_detailed(op, source, target, cfg).velocity;
}

} // namespace morphatlas
