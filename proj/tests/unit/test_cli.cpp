// Copyright 2026 The biact-sim Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "../support/temp_dir.hpp"
#include "biact/config.hpp"
#include "doctest.h"

using biact::testing::TempDir;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;  // stdout and stderr
};

Run biact_cli(const std::string& args, const fs::path& cwd = {}) {
  std::string cmd;
  if (!cwd.empty()) cmd += "cd '" + cwd.string() + "' && ";
  cmd += std::string("'") + BIACT_CLI + "' " + args + " 2>&1";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe);
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof(buf), pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Concatenated bytes of every file under `dir`, in path order.
std::string tree_bytes(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::string all;
  for (const auto& f : files) all += fs::relative(f, dir).string() + "\n" + read_bytes(f);
  return all;
}

const char* kSmallModel =
    "--d-model 16 --heads 2 --enc-layers 1 --dec-layers 1 --ffn 32 --patch 16 --latent 4 "
    "--chunk 10 --batch 4";

}  // namespace

TEST_CASE("sim-check passes on the default build and lists the invariants") {
  const Run r = biact_cli("sim-check");
  CHECK(r.code == 0);
  int rows = 0;
  std::istringstream in(r.out);
  std::string line;
  while (std::getline(in, line)) rows += line.find(" PASS ") != std::string::npos;
  CHECK(rows >= 6);
}

TEST_CASE("sim-check --print-config dumps defaults that parse back") {
  const Run r = biact_cli("sim-check --print-config");
  REQUIRE(r.code == 0);
  CHECK(r.out == biact::format_config(biact::default_config()));
  CHECK(biact::format_config(biact::parse_config(r.out)) == r.out);
}

TEST_CASE("sim-check reports a broken invariant with exit code 3") {
  TempDir dir("cli_bad");
  std::ofstream(dir.path / "weak.ini") << "[control]\nkp = 1\nkd = 1\n";
  CHECK(biact_cli("sim-check --config '" + (dir.path / "weak.ini").string() + "'").code == 3);
}

TEST_CASE("flag errors exit 1 before any file is written") {
  TempDir dir("cli_flags");
  const Run chunk0 = biact_cli("train --data nowhere --out model.ckpt --chunk 0", dir.path);
  CHECK(chunk0.code == 1);
  CHECK(chunk0.out.find("chunk_k") != std::string::npos);
  CHECK(fs::is_empty(dir.path));
  CHECK(biact_cli("").code == 1);
  CHECK(biact_cli("train --bogus-flag 1").code == 1);
  CHECK(biact_cli("train --data d").code == 1);  // --out missing
  const Run missing = biact_cli("train --data nowhere --out model.ckpt", dir.path);
  CHECK(missing.code == 1);
  CHECK(missing.out.find("no such directory nowhere") != std::string::npos);
  CHECK(biact_cli("eval --ckpt none.ckpt --object softball --out ev", dir.path).code == 1);
  CHECK(biact_cli("collect --episodes 2 --objects anvil --out data", dir.path).code == 1);
  CHECK(biact_cli("collect --episodes 0 --out data", dir.path).code == 1);
  CHECK(biact_cli("eval --ckpt x --object softball --out ev --mode sideways", dir.path).code == 1);
  CHECK(fs::is_empty(dir.path));
}

TEST_CASE("runtime failures exit 2") {
  TempDir dir("cli_runtime");
  fs::create_directories(dir.path / "empty");
  CHECK(biact_cli("train --data empty --out m.ckpt --steps 1", dir.path).code == 2);
}

TEST_CASE("equal seeds give byte-identical collect and train outputs") {
  TempDir dir("cli_seed");
  const std::string train = std::string("train --data data --steps 5 ") + kSmallModel;
  REQUIRE(biact_cli("collect --episodes 2 --out data --seed 4", dir.path).code == 0);
  REQUIRE(biact_cli("collect --episodes 2 --out data2 --seed 4", dir.path).code == 0);
  REQUIRE(biact_cli("collect --episodes 2 --out data3 --seed 5", dir.path).code == 0);
  CHECK(tree_bytes(dir.path / "data") == tree_bytes(dir.path / "data2"));
  CHECK(tree_bytes(dir.path / "data") != tree_bytes(dir.path / "data3"));
  REQUIRE(biact_cli(train + " --out a.ckpt --seed 4", dir.path).code == 0);
  REQUIRE(biact_cli(train + " --out b.ckpt --seed 4", dir.path).code == 0);
  REQUIRE(biact_cli(train + " --out c.ckpt --seed 5", dir.path).code == 0);
  CHECK(read_bytes(dir.path / "a.ckpt") == read_bytes(dir.path / "b.ckpt"));
  CHECK(read_bytes(dir.path / "a.ckpt") != read_bytes(dir.path / "c.ckpt"));

  // Metrics CSV: fixed header, one row per step, identical losses across runs.
  auto losses = [&](const char* name) {
    std::ifstream in(dir.path / name);
    std::string line, out;
    std::getline(in, line);
    CHECK(line == "step,loss_total,loss_l1,loss_kl,wall_ms");
    int rows = 0;
    while (std::getline(in, line)) {
      out += line.substr(0, line.rfind(',')) + "\n";
      ++rows;
    }
    CHECK(rows == 5);
    return out;
  };
  CHECK(losses("a.ckpt.metrics.csv") == losses("b.ckpt.metrics.csv"));

  const Run ev = biact_cli(
      "eval --ckpt a.ckpt --trials 2 --object softball --out ev --seed 4 --jobs 2", dir.path);
  REQUIRE(ev.code == 0);
  const auto report = nlohmann::json::parse(read_bytes(dir.path / "ev" / "report.json"));
  CHECK(report.at("trials").size() == 2);
  CHECK(fs::exists(dir.path / "ev" / "eval_softball_0.csv"));
  CHECK(fs::exists(dir.path / "ev" / "eval_softball_1.csv"));

  const Run ex = biact_cli("export --episode data/episode_0000 --csv ep.csv", dir.path);
  REQUIRE(ex.code == 0);
  std::ifstream csv(dir.path / "ep.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header.rfind("tick,t,follower_theta0", 0) == 0);
}

TEST_CASE("collect, train 200 steps, eval 3 trials with the default model") {
  TempDir dir("cli_pipeline");
  REQUIRE(biact_cli("collect --episodes 2 --expert scripted --out data --seed 1", dir.path).code == 0);
  REQUIRE(biact_cli("train --data data --steps 200 --out model.ckpt --seed 1", dir.path).code == 0);
  const Run ev = biact_cli("eval --ckpt model.ckpt --trials 3 --object softball --out ev --seed 1",
                           dir.path);
  REQUIRE(ev.code == 0);
  CHECK(ev.out.find("softball:") != std::string::npos);
  CHECK(fs::exists(dir.path / "ev" / "report.json"));
}
