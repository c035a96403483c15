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

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "morphatlas/cli.hpp"
#include "oracles.hpp"
#include "tempdir.hpp"

using namespace morphatlas;
using testing_support::TempDir;

namespace {

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "morphatlas");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_synth_config(const fs::path& p, double scale, int n = 4, double noise = 0.0) {
  write_json(p, {{"n_subjects", n}, {"dims", {32, 32}}, {"scale", scale}, {"noise_sigma", noise}, {"seed", 5}});
}

std::vector<std::pair<std::string, double>> read_ncc_csv(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  std::vector<std::pair<std::string, double>> rows;
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    rows.emplace_back(line.substr(0, comma), std::stod(line.substr(comma + 1)));
  }
  return rows;
}

// energy_trace.csv without its wall-time column.
std::string trace_without_wall_time(const fs::path& p) {
  std::ifstream in(p);
  std::string out;
  for (std::string line; std::getline(in, line);) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

} // namespace

TEST(Cli, DegenerateCohortRecoversBase) {
  TempDir dir("cli");
  write_synth_config(dir / "s.json", 0.0);
  ASSERT_EQ(run({"synth", "--config", (dir / "s.json").string(), "--out", (dir / "syn").string()}), 0);
  ASSERT_EQ(run({"build", "--cohort", (dir / "syn" / "cohort").string(), "--provider", "oracle", "--out",
                 (dir / "b").string()}),
            0);
  const auto atlas = read_image<2>(dir / "b" / "atlas.rawf32");
  const auto base = read_image<2>(dir / "syn" / "base.rawf32");
  EXPECT_LT(oracle::max_abs_diff(atlas, base), 1e-3);
  for (const char* f : {"config.json", "build_manifest.json", "energy_trace.csv", "velocities/meta.json"})
    EXPECT_TRUE(fs::exists(dir / "b" / f)) << f;
}

TEST(Cli, ZeroLambdaGivesMeanAndZeroVelocities) {
  TempDir dir("cli");
  write_synth_config(dir / "s.json", 1.0);
  ASSERT_EQ(run({"synth", "--config", (dir / "s.json").string(), "--out", (dir / "syn").string()}), 0);
  ASSERT_EQ(run({"build", "--cohort", (dir / "syn" / "cohort").string(), "--lambda", "0", "--out",
                 (dir / "b").string()}),
            0);
  const auto manifest = read_json(dir / "b" / "build_manifest.json");
  for (const auto& s : manifest.at("subjects")) EXPECT_EQ(s.at("velocity_max_norm").get<double>(), 0.0);
  EXPECT_EQ(manifest.at("config").at("lambda").get<double>(), 0.0);

  Cohort<2> c;
  for (const auto& p : cli::cohort_paths(dir / "syn" / "cohort")) c.images.push_back(read_image<2>(p));
  const auto mean = voxelwise_mean(c);
  const auto atlas = read_image<2>(dir / "b" / "atlas.rawf32");
  EXPECT_EQ(oracle::max_abs_diff(atlas, quantize_f32(mean)), 0.0);
}

TEST(Cli, EvaluateBeatsVoxelwiseMean) {
  TempDir dir("cli");
  write_synth_config(dir / "s.json", 1.0, 6);
  ASSERT_EQ(run({"synth", "--config", (dir / "s.json").string(), "--out", (dir / "syn").string()}), 0);
  const auto cohort = (dir / "syn" / "cohort").string();
  ASSERT_EQ(run({"build", "--cohort", cohort, "--param", "stationary", "--out", (dir / "b").string()}), 0);
  ASSERT_EQ(run({"build", "--cohort", cohort, "--lambda", "0", "--out", (dir / "mean").string()}), 0);
  ASSERT_EQ(run({"evaluate", "--atlas", (dir / "b" / "atlas.rawf32").string(), "--cohort", cohort, "--param",
                 "stationary", "--out", (dir / "atlas.csv").string()}),
            0);
  const auto a = read_ncc_csv(dir / "atlas.csv");
  ASSERT_EQ(a.size(), 7u);
  EXPECT_EQ(a.back().first, "MEAN");
  double sum = 0;
  for (std::size_t i = 0; i + 1 < a.size(); ++i) sum += a[i].second;
  EXPECT_NEAR(a.back().second, sum / 6, 1e-12);
  // The voxelwise mean compared as is, without registration.
  const auto mean = read_image<2>(dir / "mean" / "atlas.rawf32");
  double mean_ncc = 0;
  for (const auto& p : cli::cohort_paths(cohort)) mean_ncc += ncc(mean, read_image<2>(p)) / 6;
  EXPECT_GT(a.back().second, mean_ncc);
  EXPECT_TRUE(fs::exists(dir / "atlas.csv.config.json"));
}

TEST(Cli, IdenticalRunsAreByteIdentical) {
  TempDir dir("cli");
  write_synth_config(dir / "s.json", 1.5, 3, 0.02);
  ASSERT_EQ(run({"synth", "--config", (dir / "s.json").string(), "--out", (dir / "syn1").string()}), 0);
  ASSERT_EQ(run({"synth", "--config", (dir / "s.json").string(), "--out", (dir / "syn2").string()}), 0);
  for (const auto& e : fs::recursive_directory_iterator(dir / "syn1")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir / "syn1");
    EXPECT_EQ(slurp(e.path()), slurp(dir / "syn2" / rel)) << rel;
  }
  const auto cohort = (dir / "syn1" / "cohort").string();
  for (const char* out : {"b1", "b2"})
    ASSERT_EQ(run({"build", "--cohort", cohort, "--param", "stationary", "--threads", out[1] == '1' ? "1" : "2",
                   "--out", (dir / out).string()}),
              0);
  for (const auto& e : fs::recursive_directory_iterator(dir / "b1")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir / "b1");
    if (rel == "energy_trace.csv") {
      EXPECT_EQ(trace_without_wall_time(e.path()), trace_without_wall_time(dir / "b2" / rel));
    } else if (rel == "build_manifest.json" || rel == "config.json") {
      auto a = read_json(e.path()), b = read_json(dir / "b2" / rel);
      for (auto* j : {&a, &b}) {
        j->erase("timings");
        if (j->contains("config")) (*j)["config"].erase("worker_count");
        if (j->contains("atlas")) (*j)["atlas"].erase("worker_count");
      }
      EXPECT_EQ(a, b) << rel;
    } else {
      EXPECT_EQ(slurp(e.path()), slurp(dir / "b2" / rel)) << rel;
    }
  }
}

TEST(Cli, RegisterThenWarpAligns) {
  TempDir dir("cli");
  const GridShape<2> s({32, 32});
  write_image(oracle::blob_image(s, 4.0, {15.0, 16.0}), dir / "src.rawf32");
  write_image(oracle::blob_image(s, 4.0, {16.5, 15.0}), dir / "tgt.rawf32");
  ASSERT_EQ(run({"register", "--source", (dir / "src.rawf32").string(), "--target", (dir / "tgt.rawf32").string(),
                 "--param", "stationary", "--out", (dir / "v.rawf32").string()}),
            0);
  EXPECT_EQ(read_json(dir / "v.json").at("parameterization"), "stationary");
  ASSERT_EQ(run({"warp", "--image", (dir / "src.rawf32").string(), "--velocity", (dir / "v.rawf32").string(),
                 "--inverse", "--out", (dir / "w.rawf32").string()}),
            0);
  const auto src = read_image<2>(dir / "src.rawf32"), tgt = read_image<2>(dir / "tgt.rawf32");
  const auto warped = read_image<2>(dir / "w.rawf32");
  EXPECT_LT(data_term(warped, tgt, 1.0), 0.2 * data_term(src, tgt, 1.0));
}

TEST(Cli, ExitCodes) {
  TempDir dir("cli");
  EXPECT_EQ(run({"build", "--no-such-flag"}), 64);
  EXPECT_EQ(run({"frobnicate"}), 64);
  EXPECT_EQ(run({"build", "--cohort", (dir / "missing").string(), "--out", (dir / "o").string()}), 66);
  EXPECT_EQ(run({"synth", "--config", (dir / "missing.json").string(), "--out", (dir / "o").string()}), 66);

  write_synth_config(dir / "s.json", 1.0, 2);
  ASSERT_EQ(run({"synth", "--config", (dir / "s.json").string(), "--out", (dir / "syn").string()}), 0);
  const auto cohort = (dir / "syn" / "cohort").string();
  EXPECT_EQ(run({"build", "--cohort", cohort, "--provider", "files:" + (dir / "nowhere").string(), "--out",
                 (dir / "o").string()}),
            2);
  EXPECT_EQ(run({"build", "--cohort", cohort, "--provider", "cmd:no-such-command-xyz", "--out", (dir / "o").string()}),
            2);
  EXPECT_EQ(run({"build", "--cohort", cohort, "--lambda", "-1", "--out", (dir / "o").string()}), 64);

  // Velocities that fold the stationary exponential.
  const GridShape<2> s({32, 32});
  VectorField<2> bad(s);
  for_each_voxel(s, [&](const Index<2>& idx, std::size_t lin) {
    bad.comp(1)[lin] = 100.0 * std::sin(std::numbers::pi * double(idx[1]) / 2.0);
  });
  fs::create_directories(dir / "vel");
  for (const char* id : {"subj000", "subj001"}) write_field(bad, FileProvider<2>::velocity_path(dir / "vel", id));
  write_json(dir / "vel" / "meta.json", {{"dims", {32, 32}}, {"parameterization", "stationary"}});
  EXPECT_EQ(run({"build", "--cohort", cohort, "--provider", "files:" + (dir / "vel").string(), "--lambda", "1e9",
                 "--out", (dir / "o").string()}),
            3);
}

TEST(Cli, CohortListFile) {
  TempDir dir("cli");
  write_synth_config(dir / "s.json", 1.0, 3);
  ASSERT_EQ(run({"synth", "--config", (dir / "s.json").string(), "--out", (dir / "syn").string()}), 0);
  std::ofstream(dir / "list.txt") << "# two subjects\nsyn/cohort/subj002.rawf32\n\nsyn/cohort/subj000.rawf32\n";
  const auto paths = cli::cohort_paths(dir / "list.txt");
  ASSERT_EQ(paths.size(), 2u);
  EXPECT_EQ(cli::stem_id(paths[0]), "subj002");
  ASSERT_EQ(run({"build", "--cohort", (dir / "list.txt").string(), "--param", "stationary", "--out",
                 (dir / "b").string()}),
            0);
  const auto m = read_json(dir / "b" / "build_manifest.json");
  EXPECT_EQ(m.at("subjects").size(), 2u);
}

TEST(Cli, SubprocessWrapperMatchesDirectOracle) {
  TempDir dir("cli");
  write_synth_config(dir / "s.json", 1.5, 3);
  ASSERT_EQ(run({"synth", "--config", (dir / "s.json").string(), "--out", (dir / "syn").string()}), 0);
  const auto cohort = (dir / "syn" / "cohort").string();
  ASSERT_EQ(run({"build", "--cohort", cohort, "--param", "stationary", "--out", (dir / "direct").string()}), 0);
  ::setenv("MORPHATLAS", MORPHATLAS_CLI_PATH, 1);
  ASSERT_EQ(run({"build", "--cohort", cohort, "--param", "stationary", "--provider",
                 std::string("cmd:") + MORPHATLAS_WRAPPER_PATH, "--out", (dir / "sub").string()}),
            0);
  EXPECT_EQ(slurp(dir / "direct" / "atlas.rawf32"), slurp(dir / "sub" / "atlas.rawf32"));
}
