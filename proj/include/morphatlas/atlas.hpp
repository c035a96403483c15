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

// Hybrid atlas building. The joint objective over the atlas and per-subject
// velocities,
//
//   E = 1/N sum_i [ 1/(2 sigma^2) |A o phi_i^-1 - I_i|^2 + 1/2 |v_i|_V^2
//                   + lambda/2 |v_i - g_i|_V^2 ],
//
// is minimized by alternating two closed-form steps: v_i = lambda/(1+lambda) g_i
// with g_i predicted by a registration prior, and the Jacobian-weighted average
//
//   A = sum_i (I_i o phi_i) |D phi_i| / sum_i |D phi_i|.

#include <fmt/format.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "morphatlas/config_json.hpp"
#include "morphatlas/geodesic.hpp"
#include "morphatlas/io.hpp"
#include "morphatlas/parallel.hpp"
#include "morphatlas/priors.hpp"
#include "morphatlas/registration.hpp"

namespace morphatlas {

struct AtlasConfig {
  double sigma = 0.02;
  double lambda = 1.0;
  int max_outer_iters = 20;
  double tol = 1e-3;
  IntegrationConfig integration;
  MetricParams metric;
  unsigned worker_count = 0;
  // Research mode: extra data-term gradient step on each v_i after the
  // closed-form update. Zero disables it.
  double research_data_step = 0.0;

  void validate() const {
    if (!(sigma > 0.0)) throw InvalidConfig("sigma must be > 0");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw InvalidConfig("lambda must be finite and >= 0");
    if (max_outer_iters < 1) throw InvalidConfig("max_outer_iters must be >= 1");
    if (!(tol >= 0.0)) throw InvalidConfig("tol must be >= 0");
    if (!(research_data_step >= 0.0)) throw InvalidConfig("research_data_step must be >= 0");
    integration.validate();
    metric.validate();
  }
};

inline void to_json(nlohmann::json& j, const AtlasConfig& c) {
  j = {{"sigma", c.sigma},
       {"lambda", c.lambda},
       {"max_outer_iters", c.max_outer_iters},
       {"tol", c.tol},
       {"integration", c.integration},
       {"metric", c.metric},
       {"worker_count", c.worker_count},
       {"research_data_step", c.research_data_step}};
}

inline void from_json(const nlohmann::json& j, AtlasConfig& c) {
  c.sigma = j.value("sigma", c.sigma);
  c.lambda = j.value("lambda", c.lambda);
  c.max_outer_iters = j.value("max_outer_iters", c.max_outer_iters);
  c.tol = j.value("tol", c.tol);
  if (j.contains("integration")) from_json(j.at("integration"), c.integration);
  if (j.contains("metric")) from_json(j.at("metric"), c.metric);
  c.worker_count = j.value("worker_count", c.worker_count);
  c.research_data_step = j.value("research_data_step", c.research_data_step);
}

template <std::size_t D>
struct Cohort {
  std::vector<ScalarImage<D>> images;
  std::vector<std::string> ids;

  std::size_t size() const { return images.size(); }
  const GridShape<D>& shape() const { return images.front().shape(); }

  void validate(std::size_t min_subjects = 2) const {
    if (images.size() < min_subjects)
      throw InvalidConfig("cohort needs at least " + std::to_string(min_subjects) + " images");
    if (ids.size() != images.size()) throw InvalidConfig("cohort ids and images differ in count");
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (ids[i].empty()) throw InvalidConfig("empty subject id");
      for (std::size_t k = 0; k < i; ++k)
        if (ids[k] == ids[i]) throw InvalidConfig("duplicate subject id '" + ids[i] + "'");
      require_same_shape(images[i], images.front(), "cohort");
      if (!images[i].all_finite()) throw InvalidConfig("image '" + ids[i] + "' has non-finite values");
    }
  }
};

struct TermBreakdown {
  double data = 0.0;
  double reg = 0.0;
  double prior = 0.0;
  double total = 0.0;
};

struct SubjectRecord {
  std::string subject_id;
  TermBreakdown terms;
  double wall_time_s = 0.0;
};

struct IterationRecord {
  int iteration = 0;
  std::vector<SubjectRecord> subjects;
  TermBreakdown total;
  double wall_time_s = 0.0;
  double provider_time_s = 0.0;
};

enum class StopReason { converged, max_outer_iters, single_subject };

inline const char* to_string(StopReason r) {
  switch (r) {
  case StopReason::converged: return "converged";
  case StopReason::max_outer_iters: return "max_outer_iters";
  default: return "single_subject";
  }
}

template <std::size_t D>
struct AtlasState {
  ScalarImage<D> atlas;
  std::vector<VectorField<D>> velocities;
  std::vector<VectorField<D>> priors;
  std::vector<DeformationPair<D>> deformations;
  std::vector<IterationRecord> energy_trace;
  StopReason stop_reason = StopReason::max_outer_iters;
  int iterations = 0;
  bool frozen_prior = false;
  Parameterization parameterization = Parameterization::geodesic;
  nlohmann::json provider;
};

struct AtlasEnergy {
  std::vector<TermBreakdown> subjects;
  TermBreakdown total;
};

template <std::size_t D>
AtlasEnergy atlas_energy(const MetricOperator<D>& op, const ScalarImage<D>& atlas, const Cohort<D>& cohort,
                         std::span<const VectorField<D>> velocities, std::span<const DeformationPair<D>> deformations,
                         std::span<const VectorField<D>> priors, double sigma, double lambda) {
  const std::size_t n = cohort.size();
  if (velocities.size() != n || deformations.size() != n || priors.size() != n)
    throw ShapeMismatch("atlas_energy: expected " + std::to_string(n) + " velocities, maps and priors");
  AtlasEnergy e;
  e.subjects.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    require_same_shape(atlas, cohort.images[i], "atlas_energy");
    require_same_shape(velocities[i], atlas, "atlas_energy");
    require_same_shape(priors[i], atlas, "atlas_energy");
    auto& t = e.subjects[i];
    t.data = data_term(warp_image(atlas, deformations[i].inverse), cohort.images[i], sigma);
    t.reg = 0.5 * sobolev_norm_sq(op, velocities[i]);
    if (lambda != 0.0) {
      VectorField<D> diff = velocities[i];
      axpy(-1.0, priors[i], diff);
      t.prior = 0.5 * lambda * sobolev_norm_sq(op, diff);
    }
    t.total = t.data + t.reg + t.prior;
  }
  for (const auto& t : e.subjects) {
    e.total.data += t.data;
    e.total.reg += t.reg;
    e.total.prior += t.prior;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  e.total.data *= inv_n;
  e.total.reg *= inv_n;
  e.total.prior *= inv_n;
  e.total.total = e.total.data + e.total.reg + e.total.prior;
  return e;
}

template <std::size_t D>
AtlasEnergy atlas_energy(const AtlasState<D>& state, const Cohort<D>& cohort, std::span<const VectorField<D>> priors,
                         const AtlasConfig& cfg) {
  const MetricOperator<D> op(state.atlas.shape(), cfg.metric);
  return atlas_energy<D>(op, state.atlas, cohort, state.velocities, state.deformations, priors, cfg.sigma, cfg.lambda);
}

// Closed-form minimizer of 1/2 |v|_V^2 + lambda/2 |v - g|_V^2.
template <std::size_t D>
VectorField<D> shrink_velocity(const VectorField<D>& g, double lambda) {
  if (!(lambda >= 0.0)) throw InvalidConfig("lambda must be >= 0");
  const double factor = lambda / (1.0 + lambda);
  return factor * g;
}

template <std::size_t D>
ScalarImage<D> voxelwise_mean(const Cohort<D>& cohort) {
  ScalarImage<D> sum(cohort.shape());
  for (const auto& img : cohort.images)
    for (std::size_t x = 0; x < sum.size(); ++x) sum[x] += img[x];
  const double n = static_cast<double>(cohort.size());
  for (double& x : sum.values()) x /= n;
  return sum;
}

// Jacobian-weighted average of the subjects pulled back by their forward maps.
template <std::size_t D>
ScalarImage<D> update_atlas(const Cohort<D>& cohort, std::span<const DeformationPair<D>> deformations) {
  if (deformations.size() != cohort.size()) throw ShapeMismatch("update_atlas: one deformation per subject required");
  ScalarImage<D> num(cohort.shape()), den(cohort.shape());
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const auto& jac = deformations[i].jac_det_forward;
    require_same_shape(jac, num, "update_atlas");
    if (!(min_value(jac) > 0.0))
      throw DiffeomorphismViolation("update_atlas: nonpositive Jacobian determinant for subject '" +
                                    (i < cohort.ids.size() ? cohort.ids[i] : std::to_string(i)) + "'");
    const auto pulled = warp_image(cohort.images[i], deformations[i].forward);
    for (std::size_t x = 0; x < num.size(); ++x) {
      num[x] += pulled[x] * jac[x];
      den[x] += jac[x];
    }
  }
  for (std::size_t x = 0; x < num.size(); ++x) num[x] /= den[x];
  return num;
}

namespace detail {

inline double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

template <std::size_t D>
IterationRecord make_record(int iteration, const AtlasEnergy& e, const Cohort<D>& cohort,
                            const std::vector<double>& subject_times) {
  IterationRecord r;
  r.iteration = iteration;
  r.total = e.total;
  for (std::size_t i = 0; i < cohort.size(); ++i)
    r.subjects.push_back({cohort.ids[i], e.subjects[i], subject_times.empty() ? 0.0 : subject_times[i]});
  return r;
}

} // namespace detail

// Alternating closed-form minimization. Starts from the voxelwise mean and
// stops once the relative change of the total energy drops below cfg.tol or
// after cfg.max_outer_iters iterations.
template <std::size_t D>
AtlasState<D> build_atlas(const Cohort<D>& cohort, const PriorProvider<D>& provider, const AtlasConfig& cfg) {
  cfg.validate();
  cohort.validate(1);
  const auto report = provider.validate(cohort.ids, cohort.shape());
  if (!report.ok()) throw ProviderError("prior provider failed validation:\n" + report.summary());

  IntegrationConfig integ = cfg.integration;
  integ.parameterization = provider.parameterization().value_or(cfg.integration.parameterization);
  const MetricOperator<D> op(cohort.shape(), cfg.metric);
  const unsigned workers = resolve_worker_count(cfg.worker_count);
  const std::size_t n = cohort.size();

  AtlasState<D> state;
  state.parameterization = integ.parameterization;
  state.frozen_prior = !provider.live();
  state.provider = provider.describe();
  state.atlas = voxelwise_mean(cohort);
  state.velocities.assign(n, VectorField<D>(cohort.shape()));
  state.priors.assign(n, VectorField<D>(cohort.shape()));
  state.deformations.assign(n, DeformationPair<D>::identity(cohort.shape()));

  auto energy = [&] {
    return atlas_energy<D>(op, state.atlas, cohort, state.velocities, state.deformations, state.priors, cfg.sigma,
                           cfg.lambda);
  };
  state.energy_trace.push_back(detail::make_record(0, energy(), cohort, {}));

  if (n == 1) {
    auto rec = state.energy_trace.back();
    rec.iteration = 1;
    state.energy_trace.push_back(rec);
    state.iterations = 1;
    state.stop_reason = StopReason::single_subject;
    return state;
  }

  for (int j = 1; j <= cfg.max_outer_iters; ++j) {
    const auto t_iter = std::chrono::steady_clock::now();
    const bool query = j == 1 || provider.live();
    std::vector<double> subject_times(n, 0.0), provider_times(n, 0.0);
    if (query) {
      const ScalarImage<D>& previous = state.atlas;
      parallel_for(n, workers, [&](std::size_t i) {
        const auto t0 = std::chrono::steady_clock::now();
        if (cfg.lambda > 0.0) {
          auto resp = provider.provide({previous, cohort.images[i], cohort.ids[i], j});
          provider_times[i] = resp.wall_time;
          state.priors[i] = std::move(resp.velocity);
        }
        VectorField<D> v = shrink_velocity(state.priors[i], cfg.lambda);
        try {
          if (cfg.research_data_step > 0.0) {
            const auto warped = warp_image(previous, inverse_map(op, v, integ));
            axpy(cfg.research_data_step, op.apply_riesz_inverse(data_force(warped, cohort.images[i], cfg.sigma)), v);
          }
          state.deformations[i] = flow_maps(op, v, integ);
        } catch (const DiffeomorphismViolation& e) {
          throw DiffeomorphismViolation("iteration " + std::to_string(j) + ", subject '" + cohort.ids[i] +
                                        "': " + e.what());
        }
        state.velocities[i] = std::move(v);
        subject_times[i] = detail::elapsed(t0);
      });
    }
    // Frozen priors leave velocities and maps as they were after iteration 1.
    state.atlas = update_atlas<D>(cohort, state.deformations);
    auto rec = detail::make_record(j, energy(), cohort, subject_times);
    rec.wall_time_s = detail::elapsed(t_iter);
    for (double t : provider_times) rec.provider_time_s += t;
    const double prev = state.energy_trace.back().total.total;
    state.energy_trace.push_back(std::move(rec));
    state.iterations = j;
    const double cur = state.energy_trace.back().total.total;
    const double rel = std::abs(cur - prev) / std::max(std::abs(prev), std::numeric_limits<double>::min());
    spdlog::debug("atlas iteration {}: total energy {:.6g} (relative change {:.3g})", j, cur, rel);
    if (rel < cfg.tol) {
      state.stop_reason = StopReason::converged;
      return state;
    }
  }
  state.stop_reason = StopReason::max_outer_iters;
  return state;
}

// Per-subject NCC between the atlas warped onto each subject by a fresh
// oracle registration, and the subject itself.
template <std::size_t D>
std::vector<double> evaluate_ncc(const ScalarImage<D>& atlas, const Cohort<D>& cohort, const RegistrationConfig& cfg,
                                 unsigned worker_count = 0) {
  cfg.validate();
  const MetricOperator<D> op(atlas.shape(), cfg.metric);
  std::vector<double> out(cohort.size());
  parallel_for(cohort.size(), resolve_worker_count(worker_count), [&](std::size_t i) {
    require_same_shape(atlas, cohort.images[i], "evaluate_ncc");
    const auto v = oracle_register_detailed(op, atlas, cohort.images[i], cfg).velocity;
    out[i] = ncc(warp_image(atlas, inverse_map(op, v, cfg.integration)), cohort.images[i]);
  });
  return out;
}

inline double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

inline std::string format_double(double x) { return fmt::format("{:.17g}", x); }

inline void write_energy_trace_csv(const std::vector<IterationRecord>& trace, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << "iter,subject_id,data_term,reg_term,prior_term,total,wall_time_s\n";
  auto row = [&](int it, const std::string& id, const TermBreakdown& t, double wall) {
    out << it << ',' << id << ',' << format_double(t.data) << ',' << format_double(t.reg) << ','
        << format_double(t.prior) << ',' << format_double(t.total) << ',' << format_double(wall) << '\n';
  };
  for (const auto& rec : trace) {
    for (const auto& s : rec.subjects) row(rec.iteration, s.subject_id, s.terms, s.wall_time_s);
    row(rec.iteration, "TOTAL", rec.total, rec.wall_time_s);
  }
  if (!out) throw Error("cannot write " + path.string());
}

template <std::size_t D>
nlohmann::json build_manifest(const AtlasState<D>& state, const AtlasConfig& cfg, const Cohort<D>& cohort) {
  nlohmann::json j;
  j["config"] = cfg;
  j["config"]["worker_count"] = resolve_worker_count(cfg.worker_count);
  j["norm_variant"] = to_string(cfg.metric.norm);
  j["provider"] = state.provider;
  j["prior_mode"] = state.frozen_prior ? "frozen" : "live";
  j["parameterization"] = state.parameterization;
  j["stop_reason"] = to_string(state.stop_reason);
  j["iterations"] = state.iterations;
  j["final_energy"] = {{"data", state.energy_trace.back().total.data},
                       {"reg", state.energy_trace.back().total.reg},
                       {"prior", state.energy_trace.back().total.prior},
                       {"total", state.energy_trace.back().total.total}};
  nlohmann::json subjects = nlohmann::json::array();
  for (std::size_t i = 0; i < cohort.size(); ++i)
    subjects.push_back({{"subject_id", cohort.ids[i]},
                        {"velocity_max_norm", state.velocities[i].max_norm()},
                        {"prior_max_norm", state.priors[i].max_norm()},
                        {"min_jacobian", min_value(state.deformations[i].jac_det_forward)}});
  j["subjects"] = subjects;
  nlohmann::json timings = nlohmann::json::array();
  for (const auto& rec : state.energy_trace)
    timings.push_back({{"iter", rec.iteration}, {"wall_time_s", rec.wall_time_s}, {"provider_time_s", rec.provider_time_s}});
  j["timings"] = timings;
  return j;
}

} // namespace morphatlas
