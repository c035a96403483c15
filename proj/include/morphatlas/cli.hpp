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

// Command-line front end: build, register, warp, evaluate, synth.
//
// Exit codes: 0 success, 1 other failure, 2 provider error, 3 diffeomorphism
// violation, 64 usage or configuration error, 65 malformed input file,
// 66 missing input file.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "morphatlas/atlas.hpp"
#include "morphatlas/config_json.hpp"
#include "morphatlas/io.hpp"
#include "morphatlas/priors.hpp"
#include "morphatlas/synth.hpp"

namespace morphatlas {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitProvider = 2,
  kExitDiffeomorphism = 3,
  kExitUsage = 64,
  kExitDataError = 65,
  kExitNoInput = 66,
};

namespace cli {

// Optional overrides shared by the subcommands that run registrations.
struct CommonOptions {
  std::string config;
  std::optional<double> sigma;
  std::string param;
  std::string norm;
  std::optional<int> steps;
  std::string scheme;
  std::optional<unsigned> threads;
};

struct BuildOptions {
  CommonOptions common;
  std::string cohort, provider = "oracle", out, format = "rawf32";
  std::optional<double> lambda, tol, timeout;
  std::optional<int> max_iters;
  bool keep_work = false;
};

struct RegisterOptions {
  CommonOptions common;
  std::string source, target, out;
  std::optional<double> step;
  std::optional<int> max_iters;
};

struct WarpOptions {
  CommonOptions common;
  std::string image, velocity, out;
  bool inverse = false;
};

struct EvaluateOptions {
  CommonOptions common;
  std::string atlas, cohort, out;
};

struct SynthOptions {
  std::string config, out;
};

inline void add_common(CLI::App* sub, CommonOptions& o) {
  sub->add_option("--config", o.config, "JSON file with configuration overrides");
  sub->add_option("--sigma", o.sigma, "noise weight sigma");
  sub->add_option("--param", o.param, "velocity parameterization")->check(CLI::IsMember({"geodesic", "stationary"}));
  sub->add_option("--norm", o.norm, "Sobolev norm variant")->check(CLI::IsMember({"lv-lv", "lv-v"}));
  sub->add_option("--steps", o.steps, "time steps for geodesic shooting");
  sub->add_option("--scheme", o.scheme, "time integrator")->check(CLI::IsMember({"euler", "rk4"}));
  sub->add_option("--threads", o.threads, "worker threads (MORPHATLAS_THREADS overrides)");
}

inline json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  return read_json(path);
}

inline void apply_common(const CommonOptions& o, IntegrationConfig& integ, MetricParams& metric) {
  if (!o.param.empty()) integ.parameterization = json(o.param).get<Parameterization>();
  if (!o.norm.empty()) metric.norm = json(o.norm).get<NormVariant>();
  if (o.steps) integ.num_steps = *o.steps;
  if (!o.scheme.empty()) integ.scheme = json(o.scheme).get<Scheme>();
}

// Registration settings: the "registration" object of the config file, or
// the whole file when it has no such key (e.g. a bare config).
inline RegistrationConfig resolve_registration(const json& file, const CommonOptions& o) {
  RegistrationConfig rc;
  if (file.contains("registration"))
    from_json(file.at("registration"), rc);
  else if (!file.contains("atlas"))
    from_json(file, rc);
  if (o.sigma) rc.sigma = *o.sigma;
  apply_common(o, rc.integration, rc.metric);
  rc.validate();
  return rc;
}

inline std::string stem_id(const fs::path& p) {
  std::string name = p.filename().string();
  for (const char* ext : {".rawf32", ".nii"})
    if (name.size() > std::strlen(ext) && name.ends_with(ext)) return name.substr(0, name.size() - std::strlen(ext));
  return p.stem().string();
}

// A cohort is a directory of volumes (sorted by name) or a text file listing
// one volume path per line, relative to the list's directory.
inline std::vector<fs::path> cohort_paths(const fs::path& where) {
  if (!fs::exists(where)) throw FileNotFound(where.string() + ": no such file or directory");
  std::vector<fs::path> out;
  if (fs::is_directory(where)) {
    for (const auto& e : fs::directory_iterator(where)) {
      if (!e.is_regular_file()) continue;
      const auto name = e.path().filename().string();
      if (name.ends_with(".vel.rawf32")) continue;
      if (name.ends_with(".rawf32") || name.ends_with(".nii")) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
  } else {
    std::ifstream in(where);
    for (std::string line; std::getline(in, line);) {
      line.erase(0, line.find_first_not_of(" \t\r"));
      line.erase(line.find_last_not_of(" \t\r") + 1);
      if (line.empty() || line.front() == '#') continue;
      fs::path p(line);
      out.push_back(p.is_absolute() ? p : where.parent_path() / p);
    }
  }
  if (out.empty()) throw InvalidConfig(where.string() + ": cohort is empty");
  for (const auto& p : out)
    if (!fs::exists(p)) throw FileNotFound(p.string() + ": listed in cohort but missing");
  return out;
}

template <std::size_t D>
Cohort<D> load_cohort(const std::vector<fs::path>& paths) {
  Cohort<D> c;
  for (const auto& p : paths) {
    c.images.push_back(read_image<D>(p));
    c.ids.push_back(stem_id(p));
  }
  return c;
}

inline std::size_t volume_rank(const fs::path& p) { return read_volume(p).dims.size(); }

inline fs::path config_path_for(const fs::path& out) {
  fs::path p = out;
  p += ".config.json";
  return p;
}

template <std::size_t D>
int run_build(const BuildOptions& o, const std::vector<fs::path>& paths) {
  const json file = load_config(o.common.config);
  AtlasConfig cfg;
  if (file.contains("atlas")) from_json(file.at("atlas"), cfg);
  if (o.common.sigma) cfg.sigma = *o.common.sigma;
  if (o.lambda) cfg.lambda = *o.lambda;
  if (o.tol) cfg.tol = *o.tol;
  if (o.max_iters) cfg.max_outer_iters = *o.max_iters;
  if (o.common.threads) cfg.worker_count = *o.common.threads;
  apply_common(o.common, cfg.integration, cfg.metric);
  cfg.validate();

  // The built-in oracle and external commands register with the atlas model's
  // sigma, metric and flow unless the config file says otherwise.
  RegistrationConfig rc;
  rc.sigma = cfg.sigma;
  rc.integration = cfg.integration;
  rc.metric = cfg.metric;
  if (file.contains("registration")) from_json(file.at("registration"), rc);
  rc.validate();

  const fs::path out(o.out);
  fs::create_directories(out);
  std::unique_ptr<PriorProvider<D>> provider;
  if (o.provider == "oracle") {
    provider = std::make_unique<OracleProvider<D>>(rc);
  } else if (o.provider.starts_with("files:")) {
    provider = std::make_unique<FileProvider<D>>(o.provider.substr(6));
  } else if (o.provider.starts_with("cmd:")) {
    SubprocessOptions so;
    if (o.timeout) so.timeout_s = *o.timeout;
    so.keep_work_dirs = o.keep_work;
    provider = std::make_unique<SubprocessProvider<D>>(o.provider.substr(4), out / "provider_work", rc, so);
  } else {
    throw InvalidConfig("unknown provider '" + o.provider + "' (expected oracle, files:<dir> or cmd:<exe>)");
  }

  const auto cohort = load_cohort<D>(paths);
  json resolved{{"atlas", cfg}, {"registration", rc}, {"provider", provider->describe()}, {"cohort", json::array()}};
  for (const auto& p : paths) resolved["cohort"].push_back(p.string());
  write_json(out / "config.json", resolved);

  const auto state = build_atlas(cohort, *provider, cfg);

  const bool nifti = o.format == "nifti";
  write_image(state.atlas, out / (nifti ? "atlas.nii" : "atlas.rawf32"), {{"kind", "atlas"}});
  const fs::path vdir = out / "velocities";
  fs::create_directories(vdir);
  for (std::size_t i = 0; i < cohort.size(); ++i)
    write_field(state.velocities[i], FileProvider<D>::velocity_path(vdir, cohort.ids[i]),
                {{"subject_id", cohort.ids[i]}, {"parameterization", state.parameterization}});
  json vmeta = geometry_json(to_raw(state.velocities.front()));
  vmeta["parameterization"] = state.parameterization;
  write_json(vdir / "meta.json", vmeta);
  write_energy_trace_csv(state.energy_trace, out / "energy_trace.csv");
  write_json(out / "build_manifest.json", build_manifest(state, cfg, cohort));
  spdlog::info("atlas built: {} iterations, stop reason {}, final energy {:.6g}", state.iterations,
               to_string(state.stop_reason), state.energy_trace.back().total.total);
  return kExitOk;
}

template <std::size_t D>
int run_register(const RegisterOptions& o) {
  json file = load_config(o.common.config);
  RegistrationConfig rc = resolve_registration(file, o.common);
  if (o.step) rc.step_size = *o.step;
  if (o.max_iters) rc.max_iters = *o.max_iters;
  rc.validate();
  const auto source = read_image<D>(o.source);
  const auto target = read_image<D>(o.target);
  const auto v = oracle_register(source, target, rc);
  write_field(v, o.out, {{"parameterization", rc.integration.parameterization}, {"registration", rc}});
  if (format_for_path(o.out) == VolumeFormat::nifti1) write_json(config_path_for(o.out), {{"registration", rc}});
  return kExitOk;
}

template <std::size_t D>
int run_warp(const WarpOptions& o) {
  const json file = load_config(o.common.config);
  RegistrationConfig rc = resolve_registration(file, o.common);
  const auto image = read_image<D>(o.image);
  const auto raw = read_volume(o.velocity);
  const auto v = field_from_raw<D>(raw);
  // A parameterization recorded with the velocity wins over the default,
  // but not over an explicit --param.
  if (o.common.param.empty() && raw.meta.contains("parameterization"))
    rc.integration.parameterization = raw.meta.at("parameterization").get<Parameterization>();
  require_same_shape(image, v, "warp");
  const MetricOperator<D> op(image.shape(), rc.metric);
  const auto maps = flow_maps(op, v, rc.integration);
  const auto warped = warp_image(image, o.inverse ? maps.inverse : maps.forward);
  json resolved{{"integration", rc.integration}, {"metric", rc.metric}, {"inverse", o.inverse}};
  write_image(warped, o.out, {{"warp", resolved}});
  if (format_for_path(o.out) == VolumeFormat::nifti1) write_json(config_path_for(o.out), resolved);
  return kExitOk;
}

template <std::size_t D>
int run_evaluate(const EvaluateOptions& o, const std::vector<fs::path>& paths) {
  const json file = load_config(o.common.config);
  const RegistrationConfig rc = resolve_registration(file, o.common);
  const auto atlas = read_image<D>(o.atlas);
  const auto cohort = load_cohort<D>(paths);
  const auto scores = evaluate_ncc(atlas, cohort, rc, o.common.threads.value_or(0));
  const fs::path out(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream csv(out, std::ios::trunc);
  csv << "subject_id,ncc\n";
  for (std::size_t i = 0; i < scores.size(); ++i) csv << cohort.ids[i] << ',' << format_double(scores[i]) << '\n';
  csv << "MEAN," << format_double(mean_of(scores)) << '\n';
  if (!csv) throw Error("cannot write " + out.string());
  write_json(config_path_for(out), {{"registration", rc}, {"atlas", o.atlas}, {"cohort", o.cohort}});
  spdlog::info("mean NCC {:.6f} over {} subjects", mean_of(scores), scores.size());
  return kExitOk;
}

template <std::size_t D>
int run_synth(const SynthConfig& cfg, const fs::path& out) {
  const auto syn = synthesize_cohort<D>(cfg);
  fs::create_directories(out / "cohort");
  fs::create_directories(out / "true_velocities");
  write_image(syn.base, out / "base.rawf32", {{"kind", "base"}});
  for (std::size_t i = 0; i < syn.cohort.size(); ++i) {
    write_image(syn.cohort.images[i], out / "cohort" / (syn.cohort.ids[i] + ".rawf32"));
    write_field(syn.true_velocities[i], FileProvider<D>::velocity_path(out / "true_velocities", syn.cohort.ids[i]),
                {{"parameterization", Parameterization::stationary}});
  }
  json vmeta = geometry_json(to_raw(syn.base));
  vmeta["parameterization"] = Parameterization::stationary;
  write_json(out / "true_velocities" / "meta.json", vmeta);
  write_json(out / "config.json", cfg);
  return kExitOk;
}

inline void setup_logging() {
  auto logger = spdlog::get("morphatlas");
  if (!logger) logger = spdlog::stderr_color_mt("morphatlas");
  spdlog::set_default_logger(logger);
  if (!std::getenv("SPDLOG_LEVEL")) spdlog::set_level(spdlog::level::info);
}

} // namespace cli

inline int cli_main(int argc, char** argv) {
  using namespace cli;
  setup_logging();
  CLI::App app{"Atlas building with registration priors on periodic 2D/3D grids."};
  app.name("morphatlas");
  app.require_subcommand(1, 1);

  BuildOptions build;
  auto* b = app.add_subcommand("build", "build an atlas from a cohort");
  b->add_option("--cohort", build.cohort, "cohort directory or list file")->required();
  b->add_option("--provider", build.provider, "oracle | files:<dir> | cmd:<exe>");
  b->add_option("--lambda", build.lambda, "prior weight lambda");
  b->add_option("--tol", build.tol, "relative energy change stopping threshold");
  b->add_option("--max-iters", build.max_iters, "outer iteration budget");
  b->add_option("--timeout", build.timeout, "per-call timeout for cmd providers, seconds");
  b->add_flag("--keep-work", build.keep_work, "keep cmd provider work directories");
  b->add_option("--format", build.format, "atlas file format")->check(CLI::IsMember({"rawf32", "nifti"}));
  b->add_option("--out", build.out, "output directory")->required();
  add_common(b, build.common);

  RegisterOptions reg;
  auto* r = app.add_subcommand("register", "register source onto target with the built-in optimizer");
  r->add_option("--source", reg.source)->required();
  r->add_option("--target", reg.target)->required();
  r->add_option("--out", reg.out, "velocity output")->required();
  r->add_option("--step", reg.step, "gradient step size");
  r->add_option("--max-iters", reg.max_iters, "iteration budget");
  add_common(r, reg.common);

  WarpOptions warp;
  auto* w = app.add_subcommand("warp", "resample an image through the map of a velocity field");
  w->add_option("--image", warp.image)->required();
  w->add_option("--velocity", warp.velocity)->required();
  w->add_flag("--inverse", warp.inverse, "use the inverse map (image o phi^-1)");
  w->add_option("--out", warp.out)->required();
  add_common(w, warp.common);

  EvaluateOptions eval;
  auto* e = app.add_subcommand("evaluate", "per-subject NCC of the registered atlas");
  e->add_option("--atlas", eval.atlas)->required();
  e->add_option("--cohort", eval.cohort)->required();
  e->add_option("--out", eval.out, "CSV output")->required();
  add_common(e, eval.common);

  SynthOptions synth;
  auto* s = app.add_subcommand("synth", "generate a seeded synthetic cohort");
  s->add_option("--config", synth.config, "synthetic cohort JSON")->required();
  s->add_option("--out", synth.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    std::cerr << "error: " << ex.what() << "\n\n" << app.help();
    return kExitUsage;
  }

  try {
    if (*b) {
      const auto paths = cohort_paths(build.cohort);
      return volume_rank(paths.front()) == 3 ? run_build<3>(build, paths) : run_build<2>(build, paths);
    }
    if (*r) return volume_rank(reg.source) == 3 ? run_register<3>(reg) : run_register<2>(reg);
    if (*w) return volume_rank(warp.image) == 3 ? run_warp<3>(warp) : run_warp<2>(warp);
    if (*e) {
      const auto paths = cohort_paths(eval.cohort);
      return volume_rank(eval.atlas) == 3 ? run_evaluate<3>(eval, paths) : run_evaluate<2>(eval, paths);
    }
    const SynthConfig cfg = read_json(synth.config).get<SynthConfig>();
    cfg.validate();
    return cfg.dims.size() == 3 ? run_synth<3>(cfg, synth.out) : run_synth<2>(cfg, synth.out);
  } catch (const ProviderError& ex) {
    spdlog::error("provider error: {}", ex.what());
    return kExitProvider;
  } catch (const DiffeomorphismViolation& ex) {
    spdlog::error("diffeomorphism violation: {}", ex.what());
    return kExitDiffeomorphism;
  } catch (const FileNotFound& ex) {
    spdlog::error("{}", ex.what());
    return kExitNoInput;
  } catch (const InvalidConfig& ex) {
    spdlog::error("invalid configuration: {}", ex.what());
    return kExitUsage;
  } catch (const nlohmann::json::exception& ex) {
    spdlog::error("invalid configuration: {}", ex.what());
    return kExitUsage;
  } catch (const FormatError& ex) {
    spdlog::error("bad input file: {}", ex.what());
    return kExitDataError;
  } catch (const std::exception& ex) {
    spdlog::error("{}", ex.what());
    return kExitFailure;
  }
}

} // namespace morphatlas
