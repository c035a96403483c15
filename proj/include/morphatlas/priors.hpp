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

// Registration priors: something that maps (atlas, subject) to a velocity
// field. Three sources are provided: the built-in optimizer, velocity files
// computed ahead of time, and an external command speaking the directory
// protocol below.
//
// Subprocess protocol. For every request a fresh work directory holds
//   atlas.rawf32, subject.rawf32   little-endian float32, last axis fastest
//   meta.json                      dims, spacing, subject_id, iteration,
//                                  parameterization, registration config
// The command is run with that directory as its only argument and must write
//   velocity.rawf32                D components concatenated, same layout.

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <cstring>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "morphatlas/config_json.hpp"
#include "morphatlas/io.hpp"
#include "morphatlas/registration.hpp"

extern char** environ;

namespace morphatlas {

enum class ProviderMode { oracle, file, subprocess };

inline const char* to_string(ProviderMode m) {
  switch (m) {
  case ProviderMode::oracle: return "oracle";
  case ProviderMode::file: return "file";
  default: return "subprocess";
  }
}

template <std::size_t D>
struct PriorRequest {
  const ScalarImage<D>& atlas;
  const ScalarImage<D>& subject;
  std::string subject_id;
  int iteration = 0;
};

template <std::size_t D>
struct PriorResponse {
  VectorField<D> velocity;
  ProviderMode provenance = ProviderMode::oracle;
  double wall_time = 0.0;
};

struct ValidationReport {
  struct Entry {
    std::string subject_id;
    bool ok = true;
    std::string message;
  };
  std::vector<Entry> subjects;
  std::vector<std::string> config_errors;

  bool ok() const {
    return config_errors.empty() &&
           std::all_of(subjects.begin(), subjects.end(), [](const Entry& e) { return e.ok; });
  }

  std::vector<std::string> failed_subjects() const {
    std::vector<std::string> out;
    for (const auto& e : subjects)
      if (!e.ok) out.push_back(e.subject_id);
    return out;
  }

  std::string summary() const {
    std::string s;
    for (const auto& c : config_errors) s += "configuration: " + c + "\n";
    for (const auto& e : subjects)
      if (!e.ok) s += e.subject_id + ": " + e.message + "\n";
    return s.empty() ? "ok" : s;
  }
};

template <std::size_t D>
class PriorProvider {
public:
  virtual ~PriorProvider() = default;

  // Must be safe to call concurrently for different subjects.
  virtual PriorResponse<D> provide(const PriorRequest<D>& req) const = 0;

  // Dry run: checks inputs without producing any velocity.
  virtual ValidationReport validate(std::span<const std::string> subject_ids, const GridShape<D>& shape) const = 0;

  virtual ProviderMode mode() const = 0;

  // Live providers re-predict against every new atlas; frozen ones cannot.
  virtual bool live() const { return true; }

  // Parameterization the predicted velocities are meant for, when declared.
  virtual std::optional<Parameterization> parameterization() const { return std::nullopt; }

  virtual nlohmann::json describe() const { return {{"mode", to_string(mode())}, {"live", live()}}; }
};

namespace detail {

inline std::string request_context(const std::string& id, int iteration) {
  return "subject '" + id + "', iteration " + std::to_string(iteration);
}

template <std::size_t D>
void check_response_shape(const VectorField<D>& v, const GridShape<D>& expected, const std::string& ctx) {
  if (!(v.shape().dims == expected.dims))
    throw ProviderError(ctx + ": predicted velocity grid " + v.shape().describe() + " does not match " +
                        expected.describe());
  if (!v.all_finite()) throw ProviderError(ctx + ": predicted velocity has non-finite values");
}

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace detail

// Runs the built-in optimizer. Inputs and outputs pass through float32 by
// default, matching what a subprocess exchanges on disk.
template <std::size_t D>
class OracleProvider final : public PriorProvider<D> {
public:
  explicit OracleProvider(RegistrationConfig cfg, bool float32_exchange = true)
      : cfg_(std::move(cfg)), float32_exchange_(float32_exchange) {
    cfg_.validate();
  }

  PriorResponse<D> provide(const PriorRequest<D>& req) const override {
    const auto t0 = std::chrono::steady_clock::now();
    require_same_shape(req.atlas, req.subject, "provide");
    VectorField<D> v;
    try {
      if (float32_exchange_)
        v = quantize_f32(oracle_register(quantize_f32(req.atlas), quantize_f32(req.subject), cfg_));
      else
        v = oracle_register(req.atlas, req.subject, cfg_);
    } catch (const NonConvergence& e) {
      throw ProviderError(detail::request_context(req.subject_id, req.iteration) + ": " + e.what());
    }
    return {std::move(v), ProviderMode::oracle, detail::seconds_since(t0)};
  }

  ValidationReport validate(std::span<const std::string> ids, const GridShape<D>&) const override {
    ValidationReport r;
    for (const auto& id : ids) r.subjects.push_back({id, true, ""});
    return r;
  }

  ProviderMode mode() const override { return ProviderMode::oracle; }
  std::optional<Parameterization> parameterization() const override { return cfg_.integration.parameterization; }

  nlohmann::json describe() const override {
    return {{"mode", "oracle"}, {"live", true}, {"float32_exchange", float32_exchange_}, {"registration", cfg_}};
  }

  const RegistrationConfig& config() const { return cfg_; }

private:
  RegistrationConfig cfg_;
  bool float32_exchange_;
};

// Velocities precomputed per subject: <dir>/<subject_id>.vel.rawf32 with a
// shared <dir>/meta.json. Predictions ignore the atlas (frozen prior).
template <std::size_t D>
class FileProvider final : public PriorProvider<D> {
public:
  explicit FileProvider(fs::path dir) : dir_(std::move(dir)) {
    const auto meta = dir_ / "meta.json";
    if (fs::exists(meta)) {
      const auto j = read_json(meta);
      if (j.contains("parameterization")) {
        const auto p = j.at("parameterization").get<std::string>();
        if (p != "geodesic" && p != "stationary") throw InvalidConfig(meta.string() + ": unknown parameterization " + p);
        param_ = nlohmann::json(p).get<Parameterization>();
      }
    }
  }

  static fs::path velocity_path(const fs::path& dir, const std::string& id) { return dir / (id + ".vel.rawf32"); }

  PriorResponse<D> provide(const PriorRequest<D>& req) const override {
    const auto t0 = std::chrono::steady_clock::now();
    const auto ctx = detail::request_context(req.subject_id, req.iteration);
    const auto path = velocity_path(dir_, req.subject_id);
    VectorField<D> v;
    try {
      v = read_field<D>(path);
    } catch (const Error& e) {
      throw ProviderError(ctx + ": cannot load " + path.string() + ": " + e.what());
    }
    detail::check_response_shape(v, req.subject.shape(), ctx);
    return {std::move(v), ProviderMode::file, detail::seconds_since(t0)};
  }

  ValidationReport validate(std::span<const std::string> ids, const GridShape<D>& shape) const override {
    ValidationReport r;
    if (!fs::is_directory(dir_)) r.config_errors.push_back("velocity directory " + dir_.string() + " does not exist");
    for (const auto& id : ids) {
      ValidationReport::Entry e{id, true, ""};
      const auto path = velocity_path(dir_, id);
      if (!fs::exists(path)) {
        e = {id, false, "missing " + path.string()};
      } else {
        const auto expected = 4 * D * shape.size();
        const auto size = fs::file_size(path);
        if (size != expected)
          e = {id, false, path.string() + " has " + std::to_string(size) + " bytes, expected " + std::to_string(expected)};
      }
      r.subjects.push_back(std::move(e));
    }
    return r;
  }

  ProviderMode mode() const override { return ProviderMode::file; }
  bool live() const override { return false; }
  std::optional<Parameterization> parameterization() const override { return param_; }

  nlohmann::json describe() const override {
    nlohmann::json j{{"mode", "file"}, {"live", false}, {"directory", dir_.string()}};
    if (param_) j["parameterization"] = *param_;
    return j;
  }

private:
  fs::path dir_;
  std::optional<Parameterization> param_;
};

struct SubprocessOptions {
  double timeout_s = 300.0;
  int retries = 1;
  bool keep_work_dirs = false;
};

// Runs an external command per request through the directory protocol.
template <std::size_t D>
class SubprocessProvider final : public PriorProvider<D> {
public:
  SubprocessProvider(std::string command, fs::path work_root, RegistrationConfig registration,
                     SubprocessOptions opts = {})
      : command_(std::move(command)), work_root_(std::move(work_root)), registration_(std::move(registration)),
        opts_(opts) {}

  PriorResponse<D> provide(const PriorRequest<D>& req) const override {
    const auto t0 = std::chrono::steady_clock::now();
    const auto ctx = detail::request_context(req.subject_id, req.iteration);
    require_same_shape(req.atlas, req.subject, "provide");
    const fs::path dir = work_root_ / (req.subject_id + "_it" + std::to_string(req.iteration));
    std::string last_error;
    for (int attempt = 0; attempt <= opts_.retries; ++attempt) {
      try {
        auto v = run_once(req, dir);
        detail::check_response_shape(v, req.subject.shape(), ctx);
        if (!opts_.keep_work_dirs) fs::remove_all(dir);
        return {std::move(v), ProviderMode::subprocess, detail::seconds_since(t0)};
      } catch (const Error& e) {
        last_error = e.what();
      }
    }
    throw ProviderError(ctx + ": " + last_error + " (after " + std::to_string(opts_.retries + 1) + " attempts; see " +
                        dir.string() + ")");
  }

  ValidationReport validate(std::span<const std::string> ids, const GridShape<D>&) const override {
    ValidationReport r;
    if (!resolve_executable(command_))
      r.config_errors.push_back("command '" + command_ + "' not found or not executable");
    std::error_code ec;
    fs::create_directories(work_root_, ec);
    if (ec) r.config_errors.push_back("cannot create work directory " + work_root_.string() + ": " + ec.message());
    for (const auto& id : ids) r.subjects.push_back({id, true, ""});
    return r;
  }

  ProviderMode mode() const override { return ProviderMode::subprocess; }
  std::optional<Parameterization> parameterization() const override {
    return registration_.integration.parameterization;
  }

  nlohmann::json describe() const override {
    return {{"mode", "subprocess"},
            {"live", true},
            {"command", command_},
            {"work_root", work_root_.string()},
            {"timeout_s", opts_.timeout_s},
            {"retries", opts_.retries},
            {"registration", registration_}};
  }

  static std::optional<fs::path> resolve_executable(const std::string& cmd) {
    auto ok = [](const fs::path& p) { return fs::is_regular_file(p) && ::access(p.c_str(), X_OK) == 0; };
    if (cmd.find('/') != std::string::npos) return ok(cmd) ? std::optional<fs::path>(cmd) : std::nullopt;
    const char* path = std::getenv("PATH");
    std::string_view rest = path ? path : "";
    while (!rest.empty()) {
      const auto colon = rest.find(':');
      const fs::path cand = fs::path(std::string(rest.substr(0, colon))) / cmd;
      if (ok(cand)) return cand;
      if (colon == std::string_view::npos) break;
      rest.remove_prefix(colon + 1);
    }
    return std::nullopt;
  }

private:
  VectorField<D> run_once(const PriorRequest<D>& req, const fs::path& dir) const {
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_rawf32_payload(dir / "atlas.rawf32", req.atlas.values());
    write_rawf32_payload(dir / "subject.rawf32", req.subject.values());
    nlohmann::json meta = geometry_json(to_raw(req.atlas));
    meta["subject_id"] = req.subject_id;
    meta["iteration"] = req.iteration;
    meta["parameterization"] = registration_.integration.parameterization;
    meta["registration"] = registration_;
    write_json(dir / "meta.json", meta);

    run_command(dir);

    const auto out = dir / "velocity.rawf32";
    if (!fs::exists(out)) throw Error("command did not write " + out.string());
    auto values = read_rawf32_payload(out);
    const std::size_t n = req.atlas.size();
    if (values.size() != D * n)
      throw Error("malformed output: velocity.rawf32 holds " + std::to_string(values.size()) + " floats, expected " +
                  std::to_string(D * n));
    std::array<std::vector<double>, D> comps;
    for (std::size_t a = 0; a < D; ++a)
      comps[a].assign(values.begin() + static_cast<std::ptrdiff_t>(a * n),
                      values.begin() + static_cast<std::ptrdiff_t>((a + 1) * n));
    return VectorField<D>(req.atlas.shape(), std::move(comps));
  }

  void run_command(const fs::path& dir) const {
    const auto log = (dir / "command.log").string();
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_addopen(&actions, STDOUT_FILENO, log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
    posix_spawn_file_actions_adddup2(&actions, STDOUT_FILENO, STDERR_FILENO);
    std::string arg0 = command_, arg1 = dir.string();
    char* argv[] = {arg0.data(), arg1.data(), nullptr};
    pid_t pid = 0;
    const int rc = posix_spawnp(&pid, command_.c_str(), &actions, nullptr, argv, environ);
    posix_spawn_file_actions_destroy(&actions);
    if (rc != 0) throw Error("cannot start '" + command_ + "': " + std::strerror(rc));

    const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(opts_.timeout_s);
    int status = 0;
    for (;;) {
      const pid_t done = ::waitpid(pid, &status, WNOHANG);
      if (done == pid) break;
      if (done < 0) throw Error("waitpid failed for '" + command_ + "'");
      if (std::chrono::steady_clock::now() > deadline) {
        ::kill(pid, SIGKILL);
        ::waitpid(pid, &status, 0);
        throw Error("command timed out after " + std::to_string(opts_.timeout_s) + " s");
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    if (WIFSIGNALED(status)) throw Error("command killed by signal " + std::to_string(WTERMSIG(status)));
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
      throw Error("command exited with status " + std::to_string(WEXITSTATUS(status)));
  }

  std::string command_;
  fs::path work_root_;
  RegistrationConfig registration_;
  SubprocessOptions opts_;
};

} // namespace morphatlas
