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

// JSON mapping for the numeric configuration structs. Missing keys keep
// their defaults, so partial config files are accepted.

#include <string>

#include <json.hpp>

#include "morphatlas/geodesic.hpp"
#include "morphatlas/registration.hpp"
#include "morphatlas/spectral.hpp"

namespace morphatlas {

NLOHMANN_JSON_SERIALIZE_ENUM(NormVariant, {{NormVariant::lv_lv, "lv-lv"}, {NormVariant::lv_v, "lv-v"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Scheme, {{Scheme::euler, "euler"}, {Scheme::rk4, "rk4"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Parameterization, {{Parameterization::geodesic, "geodesic"},
                                                {Parameterization::stationary, "stationary"}})

namespace detail {

template <class E>
E parse_enum(const nlohmann::json& j, const char* key, E fallback, std::initializer_list<const char*> allowed) {
  if (!j.contains(key)) return fallback;
  const auto s = j.at(key).get<std::string>();
  for (const char* a : allowed)
    if (s == a) return nlohmann::json(s).get<E>();
  throw InvalidConfig(std::string("unknown value '") + s + "' for " + key);
}

} // namespace detail

inline void to_json(nlohmann::json& j, const MetricParams& p) {
  j = {{"alpha", p.alpha}, {"gamma", p.gamma}, {"power", p.power}, {"norm", p.norm}};
}

inline void from_json(const nlohmann::json& j, MetricParams& p) {
  p.alpha = j.value("alpha", p.alpha);
  p.gamma = j.value("gamma", p.gamma);
  p.power = j.value("power", p.power);
  p.norm = detail::parse_enum(j, "norm", p.norm, {"lv-lv", "lv-v"});
}

inline void to_json(nlohmann::json& j, const IntegrationConfig& c) {
  j = {{"num_steps", c.num_steps},
       {"scheme", c.scheme},
       {"parameterization", c.parameterization},
       {"squarings", c.squarings}};
}

inline void from_json(const nlohmann::json& j, IntegrationConfig& c) {
  c.num_steps = j.value("num_steps", c.num_steps);
  c.scheme = detail::parse_enum(j, "scheme", c.scheme, {"euler", "rk4"});
  c.parameterization = detail::parse_enum(j, "parameterization", c.parameterization, {"geodesic", "stationary"});
  c.squarings = j.value("squarings", c.squarings);
}

inline void to_json(nlohmann::json& j, const RegistrationConfig& c) {
  j = {{"sigma", c.sigma},
       {"step_size", c.step_size},
       {"max_iters", c.max_iters},
       {"tol", c.tol},
       {"divergence_patience", c.divergence_patience},
       {"integration", c.integration},
       {"metric", c.metric}};
}

inline void from_json(const nlohmann::json& j, RegistrationConfig& c) {
  c.sigma = j.value("sigma", c.sigma);
  c.step_size = j.value("step_size", c.step_size);
  c.max_iters = j.value("max_iters", c.max_iters);
  c.tol = j.value("tol", c.tol);
  c.divergence_patience = j.value("divergence_patience", c.divergence_patience);
  if (j.contains("integration")) from_json(j.at("integration"), c.integration);
  if (j.contains("metric")) from_json(j.at("metric"), c.metric);
}

} // namespace morphatlas
