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

#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "../support/policy_fixtures.hpp"
#include "../support/runtime_fixtures.hpp"
#include "../support/temp_dir.hpp"
#include "biact/runtime.hpp"
#include "biact/seeding.hpp"
#include "doctest.h"

using namespace biact;
using namespace biact::testing;
namespace fs = std::filesystem;

TEST_CASE("expert: first target is home and the approach ends at the pick pose") {
  const SceneSetup setup = setup_with("softball");
  ScriptedExpert ex(setup, ExpertConfig{}, setup.object.initial_position, 3);
  const auto& wp = ex.waypoints();
  REQUIRE(wp.size() == 5);
  const Vec2 pick = forward_kinematics(std::vector<double>{wp[1][0], wp[1][1]}, setup.arm);
  CHECK(pick.x == doctest::Approx(ex.pick_point().x).epsilon(1e-12));
  CHECK(pick.y == doctest::Approx(ex.pick_point().y).epsilon(1e-12));
  CHECK(distance(ex.pick_point(), setup.object.initial_position) <=
        std::sqrt(2.0) * ExpertConfig{}.waypoint_jitter + 1e-12);

  Plant plant(setup.arm, setup.object, setup.scene);
  SceneState s = plant.initial_state();
  const auto first = ex.step(s, 0.0);
  for (std::size_t i = 0; i < first.size(); ++i) CHECK(first[i] == setup.arm.home_angles[i]);
  CHECK(ex.phase() == ExpertPhase::approach);
  s.time = 2.5;  // past any jittered approach time
  const auto at_pick = ex.step(s, 0.0);
  CHECK(ex.phase() == ExpertPhase::settle);
  CHECK(at_pick[0] == doctest::Approx(wp[1][0]).epsilon(1e-12));
  CHECK(at_pick[1] == doctest::Approx(wp[1][1]).epsilon(1e-12));
}

TEST_CASE("expert: unreachable place waypoint is reported") {
  SceneSetup setup = setup_with("softball");
  setup.task.place_center = Vec2{0.5, 0.0};
  CHECK_THROWS_AS(ScriptedExpert(setup, ExpertConfig{}, setup.object.initial_position, 1),
                  ExpertError);
}

TEST_CASE("demonstration: default scene succeeds within 10 s and passes the gate") {
  const SceneSetup setup;  // default object
  const DemoResult d = run_demonstration(setup, ExpertConfig{}, 11);
  INFO(d.failure);
  CHECK(d.success);
  CHECK(d.duration < 10.0);
  CHECK(d.phases.picked);
  CHECK(d.phases.moved);
  CHECK(d.gate.passed);
  CHECK(d.gate.rest_samples > 0);
  CHECK(d.episode.ticks() == static_cast<std::size_t>(std::llround(d.duration * 100)));
  CHECK_NOTHROW(d.episode.validate());
}

TEST_CASE("demonstration: doubled mass closes further and loads the arm more in the lift") {
  SceneSetup light;
  SceneSetup heavy = light;
  heavy.object.mass *= 2.0;
  const DemoResult a = run_demonstration(light, ExpertConfig{}, 5);
  const DemoResult b = run_demonstration(heavy, ExpertConfig{}, 5);
  REQUIRE(a.success);
  REQUIRE(b.success);
  // Gripper angle while held: the recorded follower gripper angle at its maximum.
  auto max_grip = [](const Episode& ep) {
    double m = 0.0;
    for (std::size_t t = 0; t < ep.ticks(); ++t) m = std::max(m, double(ep.follower_row(t)[2]));
    return m;
  };
  CHECK(max_grip(b.episode) > max_grip(a.episode));
  const auto lift = static_cast<std::size_t>(ExpertPhase::lift);
  for (std::size_t j = 0; j < 2; ++j) {
    CHECK(b.phase_peak_torque[lift][j] > a.phase_peak_torque[lift][j]);
  }
}

TEST_CASE("demonstration: fixed seed reproduces the episode bit for bit") {
  const SceneSetup setup = setup_with("foam_ball");
  const DemoResult a = run_demonstration(setup, ExpertConfig{}, 21);
  const DemoResult b = run_demonstration(setup, ExpertConfig{}, 21);
  CHECK(a.episode.follower_series == b.episode.follower_series);
  CHECK(a.episode.leader_series == b.episode.leader_series);
  CHECK(a.episode.overhead_frames == b.episode.overhead_frames);
  const DemoResult c = run_demonstration(setup, ExpertConfig{}, 22);
  CHECK(a.episode.follower_series != c.episode.follower_series);
}

TEST_CASE("quality gate: a soft position coupling breaks tracking and is rejected") {
  SceneSetup setup;
  setup.gains.kp = 25.0;
  setup.gains.kd = 10.0;
  const DemoResult d = run_demonstration(setup, ExpertConfig{}, 2);
  CHECK_FALSE(d.gate.passed);
  CHECK(d.gate.tracking_error > 0.01);
  CHECK(d.gate.diagnostic.find("position tracking") != std::string::npos);

  TempDir tmp("biact_runtime");
  CollectOptions opt;
  opt.episodes = 1;
  opt.objects = {setup.object};
  opt.out_dir = tmp.path / "out";
  opt.max_attempts_per_episode = 2;
  std::ostringstream log;
  opt.log = &log;
  CHECK_THROWS_AS(collect(setup, opt), ExpertError);
  CHECK(log.str().find("quality gate") != std::string::npos);
  CHECK(list_episodes(opt.out_dir).empty());
}

TEST_CASE("collect: two episodes over two objects, one per object, all loadable") {
  TempDir tmp("biact_runtime");
  CollectOptions opt;
  opt.episodes = 2;
  opt.objects = {parse_object_spec("foam_ball"), parse_object_spec("softball")};
  opt.out_dir = tmp.path / "data";
  opt.seed = 4;
  const CollectReport r = collect(SceneSetup{}, opt);
  REQUIRE(r.saved.size() == 2);
  const auto dirs = list_episodes(opt.out_dir);
  REQUIRE(dirs.size() == 2);
  const Episode a = load_episode(dirs[0]);
  const Episode b = load_episode(dirs[1]);
  CHECK(a.meta.object_spec.name == "foam_ball");
  CHECK(b.meta.object_spec.name == "softball");
  CHECK(a.meta.success);
  CHECK(a.meta.source == "scripted");
  CHECK(r.total_ticks == a.ticks() + b.ticks());
  // Stats are derived data: recomputing from the loaded series matches.
  const auto stats = compute_stats(a.follower_series, a.width());
  for (std::size_t c = 0; c < a.width(); ++c) {
    CHECK(stats.mean[c] == doctest::Approx(a.meta.normalization.follower.mean[c]).epsilon(1e-6));
  }
}

TEST_CASE("collect: 50 demonstrations give a corpus on the order of 44k ticks") {
  std::size_t ticks = 0;
  const std::vector<std::string> objects{"foam_ball", "softball"};
  for (int i = 0; i < 50; ++i) {
    const DemoResult d =
        run_demonstration(setup_with(objects[static_cast<std::size_t>(i) % 2]), ExpertConfig{},
                          mix_seed(9, static_cast<std::uint64_t>(i)));
    REQUIRE(d.success);
    ticks += d.episode.ticks();
  }
  const double ratio = static_cast<double>(ticks) / 44184.0;
  CHECK(ratio > 0.5);
  CHECK(ratio < 2.0);
}

TEST_CASE("evaluate_success: boundary and crush rules") {
  TaskSpec task;
  SceneState s;
  s.object_position = task.place_center;
  CHECK(evaluate_success(s, task));
  task.place_center = Vec2{0.0, 0.0};  // exact distances below
  s.object_position = Vec2{0.036, 0.0};
  CHECK_FALSE(evaluate_success(s, task));
  s.object_position = Vec2{0.0, -0.035};
  CHECK(evaluate_success(s, task));
  s.object_position = task.place_center;
  s.object_crushed = true;
  CHECK_FALSE(evaluate_success(s, task));
  s.object_crushed = false;
  s.object_held = true;
  CHECK_FALSE(evaluate_success(s, task));
}

TEST_CASE("schedule: T=100, k=20 chunk_serial runs 5 inferences and 10 substeps per tick") {
  const SceneSetup setup;
  CountingSource src(20);
  ExecutionOptions opt;
  opt.max_ticks = 100;
  const ExecutionResult r = execute_autonomous(setup, src, ChunkSchedule{20}, opt);
  CHECK(r.inference_ticks == std::vector<int>{0, 20, 40, 60, 80});
  CHECK(src.ticks == r.inference_ticks);
  CHECK(r.ticks == 100);
  CHECK(r.plant_steps == 1000);
  CHECK(r.min_substeps_per_tick == 10);
  CHECK(r.max_substeps_per_tick == 10);
  // Within a chunk the command stays the one predicted at its start.
  CHECK(r.trajectory[39].command_angle[0] == doctest::Approx(20e-3));
  CHECK(r.trajectory[40].command_angle[0] == doctest::Approx(40e-3));
}

TEST_CASE("schedule: inference count is ceil(T / k)") {
  const SceneSetup setup;
  for (int k : {1, 3, 7, 20, 33}) {
    for (int T : {1, 10, 57}) {
      CountingSource src(k);
      ExecutionOptions opt;
      opt.max_ticks = T;
      const ExecutionResult r = execute_autonomous(setup, src, ChunkSchedule{k}, opt);
      CHECK(static_cast<int>(r.inference_ticks.size()) == (T + k - 1) / k);
      CHECK(r.plant_steps == 10 * T);
    }
  }
}

TEST_CASE("temporal ensemble: weights for ages 0 and 1 with m = ln 2") {
  const int ages[] = {0, 1};
  const auto w = ensemble_weights(ages, std::numbers::ln2);
  CHECK(w[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(w[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("temporal ensemble: every tick infers and blends all live chunks") {
  const SceneSetup setup;
  CountingSource src(3);
  ChunkSchedule sched{3, ChunkMode::temporal_ensemble, 0.5};
  ExecutionOptions opt;
  opt.max_ticks = 6;
  const ExecutionResult r = execute_autonomous(setup, src, sched, opt);
  CHECK(r.inference_ticks.size() == 6);
  // At tick 5 chunks from ticks 3, 4, 5 are live with ages 2, 1, 0.
  const int ages[] = {2, 1, 0};
  const auto w = ensemble_weights(ages, 0.5);
  const double want = 1e-3 * (3 * w[0] + 4 * w[1] + 5 * w[2]);
  CHECK(r.trajectory[5].command_angle[0] == doctest::Approx(want).epsilon(1e-12));
  CHECK(r.trajectory[0].command_angle[0] == 0.0);
}

TEST_CASE("executor: the leader arm is absent for the whole run") {
  const SceneSetup setup;
  CountingSource src(5);
  ExecutionOptions opt;
  opt.max_ticks = 30;
  int calls = 0;
  bool leader_seen = false;
  opt.on_tick = [&](const SceneState& s) {
    ++calls;
    leader_seen = leader_seen || !s.leader.empty();
  };
  execute_autonomous(setup, src, ChunkSchedule{5}, opt);
  CHECK(calls == 30);
  CHECK_FALSE(leader_seen);
}

TEST_CASE("executor: non-finite output aborts and flags the episode") {
  class NanSource : public CountingSource {
   public:
    NanSource() : CountingSource(4) {}
    ActionChunk predict(const SampledObservation& o, int tick) override {
      ActionChunk c = CountingSource::predict(o, tick);
      if (tick >= 8) c.raw[0] = std::numeric_limits<double>::quiet_NaN();
      return c;
    }
  } src;
  ExecutionOptions opt;
  opt.max_ticks = 20;
  const ExecutionResult r = execute_autonomous(SceneSetup{}, src, ChunkSchedule{4}, opt);
  CHECK(r.aborted);
  CHECK_FALSE(r.success);
  CHECK(r.ticks == 8);
  CHECK(r.abort_reason.find("tick 8") != std::string::npos);
}

TEST_CASE("executor: w/o-force sources get a zero torque command") {
  class NoForce : public CountingSource {
   public:
    NoForce() : CountingSource(4) {}
    ActionChunk predict(const SampledObservation& o, int tick) override {
      ActionChunk c = CountingSource::predict(o, tick);
      for (int r = 0; r < c.k; ++r) {
        for (std::size_t j = 6; j < 9; ++j) c.raw[static_cast<std::size_t>(r) * 9 + j] = 0.7;
      }
      return c;
    }
    bool uses_force() const override { return false; }
  } src;
  ExecutionOptions opt;
  opt.max_ticks = 8;
  const ExecutionResult r = execute_autonomous(SceneSetup{}, src, ChunkSchedule{4}, opt);
  for (const auto& row : r.trajectory) {
    for (double t : row.command_torque) CHECK(t == 0.0);
  }
}

TEST_CASE("replay oracle: recorded leader log reproduces the follower within 1 cm RMS") {
  for (const char* name : {"foam_ball", "softball"}) {
    SceneSetup setup = setup_with(name);
    const DemoResult d = run_demonstration(setup, ExpertConfig{}, 31);
    REQUIRE(d.success);
    // The episode records where the object actually started.
    setup.object = d.episode.meta.object_spec;
    ReplaySource src(d.episode, 20);
    ExecutionOptions opt;
    opt.max_ticks = static_cast<int>(d.episode.ticks());
    const ExecutionResult r = execute_autonomous(setup, src, ChunkSchedule{20}, opt);
    const double rms = ee_rms(d.episode, r, setup.arm);
    INFO(name << " rms " << rms);
    CHECK(rms < 0.01);
    CHECK(r.success);
    // Same run again is identical.
    ReplaySource src2(d.episode, 20);
    const ExecutionResult r2 = execute_autonomous(setup, src2, ChunkSchedule{20}, opt);
    CHECK(r2.trajectory.back().ee.x == r.trajectory.back().ee.x);
    CHECK(r2.trajectory.back().ee.y == r.trajectory.back().ee.y);
  }
}

TEST_CASE("trajectory csv: header and one line per tick") {
  CountingSource src(2);
  ExecutionOptions opt;
  opt.max_ticks = 3;
  const ExecutionResult r = execute_autonomous(SceneSetup{}, src, ChunkSchedule{2}, opt);
  std::ostringstream os;
  write_trajectory_csv(os, r.trajectory);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  CHECK(line ==
        "tick,t,ee_x,ee_y,object_x,object_y,held,theta_f0,theta_f1,theta_f2,cmd_theta0,"
        "cmd_theta1,cmd_theta2,cmd_tau0,cmd_tau1,cmd_tau2");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 3);
}

TEST_CASE("object specs: catalog names, overrides and errors") {
  const ObjectSpec g = parse_object_spec("glue_jar");
  CHECK(g.mass == doctest::Approx(0.063));
  CHECK(g.radius == doctest::Approx(0.0225));
  const ObjectSpec o = parse_object_spec("softball:mass=0.06, stiffness=200");
  CHECK(o.mass == doctest::Approx(0.06));
  CHECK(o.contact_stiffness == doctest::Approx(200));
  CHECK(o.radius == doctest::Approx(0.033));
  const ObjectSpec c = parse_object_spec("cube:mass=0.01,radius=0.02,stiffness=500,crush=5");
  CHECK(c.name == "cube");
  CHECK_THROWS_WITH_AS(parse_object_spec("brick"), doctest::Contains("unknown object"),
                       std::invalid_argument);
  CHECK_THROWS_WITH_AS(parse_object_spec("softball:color=red"), doctest::Contains("unknown object key"),
                       std::invalid_argument);
  CHECK_THROWS_AS(parse_object_spec("softball:mass=-1"), std::invalid_argument);
}

TEST_CASE("chunk schedule validation") {
  CHECK_THROWS_AS(ChunkSchedule{0}.validate(), std::invalid_argument);
  CHECK_THROWS_AS((ChunkSchedule{5, ChunkMode::temporal_ensemble, 0.0}.validate()),
                  std::invalid_argument);
  CountingSource src(4);
  CHECK_THROWS_AS(execute_autonomous(SceneSetup{}, src, ChunkSchedule{5}), std::invalid_argument);
  CHECK(chunk_mode_from_string("ensemble") == ChunkMode::temporal_ensemble);
  CHECK_THROWS_AS(chunk_mode_from_string("bogus"), std::invalid_argument);
}

TEST_CASE("evaluate_policy: results do not depend on the number of jobs") {
  BiActPolicy policy(tiny_config(), unit_stats(9), 3);
  randomize(policy, 4, 0.05);
  SceneSetup base = setup_with("softball");
  base.render.width = base.render.height = 8;
  base.task.time_limit = 0.5;
  EvalOptions eo;
  eo.trials = 3;
  eo.seed = 5;
  eo.schedule.k = 2;
  const std::vector<ObjectSpec> objects{parse_object_spec("foam_ball"), parse_object_spec("softball")};
  eo.jobs = 1;
  nlohmann::json serial = evaluate_policy(policy, base, objects, eo).to_json();
  eo.jobs = 3;
  nlohmann::json parallel = evaluate_policy(policy, base, objects, eo).to_json();
  for (auto* j : {&serial, &parallel}) {
    for (auto& t : (*j)["trials"]) t.erase("max_inference_ms");
  }
  CHECK(serial == parallel);
  CHECK(serial["trials"].size() == 6);
}
