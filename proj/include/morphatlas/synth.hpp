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

// Seeded synthetic cohorts: a base pattern warped by random smooth stationary
// fields plus Gaussian intensity noise.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "morphatlas/atlas.hpp"
#include "morphatlas/geodesic.hpp"

namespace morphatlas {

enum class BasePattern { bullseye, checker_blob };

NLOHMANN_JSON_SERIALIZE_ENUM(BasePattern, {{BasePattern::bullseye, "bullseye"},
                                           {BasePattern::checker_blob, "checker-blob"}})

struct SynthConfig {
  int n_subjects = 20;
  std::vector<int> dims{64, 64};
  double scale = 1.0;
  double noise_sigma = 0.0;
  std::optional<std::uint64_t> seed;
  BasePattern pattern = BasePattern::bullseye;
  MetricParams metric;
  int squarings = 6;

  void validate() const {
    if (n_subjects < 1) throw InvalidConfig("n_subjects must be >= 1");
    if (dims.size() != 2 && dims.size() != 3) throw InvalidConfig("dims must have 2 or 3 entries");
    for (int d : dims)
      if (d < 4) throw InvalidConfig("every grid dimension must be >= 4");
    if (!(scale >= 0.0 && scale <= 2.0)) throw InvalidConfig("deformation scale must lie in [0, 2] voxels");
    if (!(noise_sigma >= 0.0)) throw InvalidConfig("noise_sigma must be >= 0");
    if (!seed) throw InvalidConfig("synth config requires a seed");
    metric.validate();
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"n_subjects", c.n_subjects}, {"dims", c.dims},      {"scale", c.scale},
       {"noise_sigma", c.noise_sigma}, {"pattern", c.pattern}, {"metric", c.metric},
       {"squarings", c.squarings}};
  if (c.seed) j["seed"] = *c.seed;
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.n_subjects = j.value("n_subjects", c.n_subjects);
  c.dims = j.value("dims", c.dims);
  c.scale = j.value("scale", c.scale);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("pattern")) {
    c.pattern = j.at("pattern").get<BasePattern>();
    if (j.at("pattern") != nlohmann::json(c.pattern))
      throw InvalidConfig("unknown pattern " + j.at("pattern").dump());
  }
  if (j.contains("metric")) from_json(j.at("metric"), c.metric);
  c.squarings = j.value("squarings", c.squarings);
}

template <std::size_t D>
struct SynthCohort {
  Cohort<D> cohort;
  ScalarImage<D> base;
  std::vector<VectorField<D>> true_velocities;
  std::vector<DeformationPair<D>> true_deformations;
};

template <std::size_t D>
ScalarImage<D> base_pattern(const GridShape<D>& shape, BasePattern pattern) {
  ScalarImage<D> img(shape);
  int nmin = shape.dims[0];
  for (int d : shape.dims) nmin = std::min(nmin, d);
  const double radius = 0.35 * nmin;
  for_each_voxel(shape, [&](const Index<D>& idx, std::size_t lin) {
    double r2 = 0.0;
    for (std::size_t a = 0; a < D; ++a) {
      const double c = idx[a] - 0.5 * shape.dims[a];
      r2 += c * c;
    }
    const double r = std::sqrt(r2);
    if (pattern == BasePattern::bullseye) {
      const double wavelength = std::max(radius / 2.5, 8.0);
      const double window = 0.5 * (1.0 - std::tanh((r - radius) / 1.5));
      img[lin] = 0.5 * (1.0 + std::cos(2.0 * std::numbers::pi * r / wavelength)) * window;
    } else {
      double checker = 1.0;
      for (std::size_t a = 0; a < D; ++a)
        checker *= std::tanh(3.0 * std::sin(2.0 * std::numbers::pi * idx[a] / (0.5 * shape.dims[a])));
      const double blob = std::exp(-r2 / (2.0 * radius * radius * 0.5));
      img[lin] = (0.5 + 0.5 * checker) * blob;
    }
  });
  return img;
}

// White noise smoothed by K, mean removed, rescaled to a maximum pointwise norm.
template <std::size_t D>
VectorField<D> random_smooth_field(const MetricOperator<D>& op, double max_norm, std::mt19937_64& rng) {
  VectorField<D> w(op.shape());
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t a = 0; a < D; ++a)
    for (double& x : w.comp(a)) x = normal(rng);
  w = op.apply_K(w);
  for (std::size_t a = 0; a < D; ++a) {
    auto c = w.comp(a);
    double mean = 0.0;
    for (double x : c) mean += x;
    mean /= static_cast<double>(c.size());
    for (double& x : c) x -= mean;
  }
  const double n = w.max_norm();
  if (max_norm == 0.0 || n == 0.0) return VectorField<D>(op.shape());
  w *= max_norm / n;
  return w;
}

template <std::size_t D>
SynthCohort<D> synthesize_cohort(const SynthConfig& cfg) {
  cfg.validate();
  if (cfg.dims.size() != D) throw InvalidConfig("synth dims do not match the requested dimension");
  GridShape<D> shape;
  for (std::size_t a = 0; a < D; ++a) {
    shape.dims[a] = cfg.dims[a];
    shape.spacing[a] = 1.0;
  }
  shape.validate();
  const MetricOperator<D> op(shape, cfg.metric);
  IntegrationConfig integ;
  integ.parameterization = Parameterization::stationary;
  integ.squarings = cfg.squarings;

  std::mt19937_64 rng(*cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SynthCohort<D> out;
  out.base = base_pattern(shape, cfg.pattern);
  for (int i = 0; i < cfg.n_subjects; ++i) {
    auto w = random_smooth_field(op, cfg.scale, rng);
    auto maps = svf_exponential(w, integ);
    auto img = warp_image(out.base, maps.inverse);
    if (cfg.noise_sigma > 0.0)
      for (double& x : img.values()) x += cfg.noise_sigma * normal(rng);
    out.cohort.images.push_back(std::move(img));
    out.cohort.ids.push_back(fmt::format("subj{:03d}", i));
    out.true_velocities.push_back(std::move(w));
    out.true_deformations.push_back(std::move(maps));
  }
  return out;
}

} // namespace morphatlas
