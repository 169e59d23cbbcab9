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

// Closed-loop orchestration: scripted demonstrations through the bilateral
// loop, episode collection, autonomous chunked execution and evaluation.
//
// Timing: the plant runs at 1 kHz, recording and policy ticks at 100 Hz. A
// 100 Hz tick covers exactly `substeps` plant steps, and the command chosen at
// the start of the tick is held across all of them.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "biact/arm_dynamics.hpp"
#include "biact/bilateral_control.hpp"
#include "biact/biact_policy.hpp"
#include "biact/episode_store.hpp"
#include "biact/observation.hpp"

namespace biact {

class ExpertError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TaskSpec {
  TaskKind task = TaskKind::pick_place;
  Vec2 pick_position{0.26, -0.1425};
  Vec2 place_center{0.26, 0.1425};
  double place_radius = 0.035;
  double time_limit = 10.0;  // s

  void validate() const;
};

/// Everything needed to build one simulated world.
struct SceneSetup {
  ArmConfig arm = ArmConfig::defaults(2);
  ControlGains gains = ControlGains::matching(ArmConfig::defaults(2));
  SceneConfig scene;
  ObjectSpec object;
  TaskSpec task;
  RenderSpec render;
  int substeps = 10;  // plant steps per 100 Hz tick

  void validate() const;
};

/// Named desk-scale objects. Sizes and masses follow the physical objects;
/// stiffness maps the qualitative hardness scale onto N/m.
std::vector<ObjectSpec> object_catalog();
/// Catalog name, optionally followed by overrides:
/// "glue_jar" or "softball:mass=0.06,stiffness=200,radius=0.03,crush=8".
ObjectSpec parse_object_spec(const std::string& text);

// ---------------------------------------------------------------------------
// Success

struct PhaseFlags {
  bool picked = false;  // object held at some point
  bool moved = false;   // object carried into the place area while held
  bool placed = false;  // final success
  bool crushed = false;
  double final_distance = 0.0;  // object to place center [m]
};

/// Object intact, released, and inside the place circle (boundary inclusive).
bool evaluate_success(const SceneState& scene, const TaskSpec& task);

/// Accumulates per-phase flags while a run progresses.
class PhaseTracker {
 public:
  explicit PhaseTracker(TaskSpec task) : task_(std::move(task)) {}
  void observe(const SceneState& scene);
  PhaseFlags finish(const SceneState& final_scene) const;

 private:
  TaskSpec task_;
  bool picked_ = false;
  bool moved_ = false;
};

// ---------------------------------------------------------------------------
// Scripted expert

enum class ExpertPhase { approach, settle, grip, lift, transport, release, retreat, done };
const char* to_string(ExpertPhase phase);

struct ExpertConfig {
  double approach_time = 1.8;
  double settle_time = 0.1;
  double grip_rate = 0.5;        // gripper target closing speed [rad/s]
  double grip_ramp_time = 0.3;   // target accelerates to grip_rate over this time
  // Felt force is ignored until the ramp has settled; before that the
  // leader's own acceleration dominates the reaction estimate.
  double grip_sense_delay = 0.4;
  double grip_margin = 2.0;      // squeeze until felt force >= margin x hold threshold
  double min_grip_force = 1.5;   // [N]
  double grip_dwell = 0.1;       // pause after the grip force is reached
  double lift_time = 0.6;
  double lift_distance = 0.03;   // pull toward the base after gripping [m]
  double transport_time = 2.2;
  double release_time = 0.6;
  double retreat_time = 1.0;
  double final_hold = 0.8;  // stand still at the retreat pose before finishing
  Vec2 retreat_position{0.2, 0.05};
  double waypoint_jitter = 0.003;  // uniform +/- on every Cartesian waypoint [m]
  double timing_jitter = 0.1;      // uniform +/- on segment durations [s]
  OperatorModel op;

  void validate() const;
};

/// Waypoint state machine that plays the human operator: it produces leader
/// joint targets, and the leader is pulled toward them by the operator model.
/// Grip closure ends when the force felt through the leader reaches the target.
class ScriptedExpert {
 public:
  /// `object_position` is where the expert sees the object. Throws ExpertError
  /// when a waypoint lies outside the workspace.
  ScriptedExpert(const SceneSetup& setup, ExpertConfig config, Vec2 object_position,
                 std::uint64_t seed);

  /// Leader joint targets at `scene.time`; advances the phase machine.
  /// `felt_gripper_torque` is the leader's gripper reaction-torque estimate.
  std::vector<double> step(const SceneState& scene, double felt_gripper_torque);

  ExpertPhase phase() const { return phase_; }
  bool done() const { return phase_ == ExpertPhase::done; }
  /// Grip force target [N].
  double grip_force_target() const { return grip_target_; }
  /// Joint-space waypoints: home, pick, lift, place, retreat.
  const std::vector<std::vector<double>>& waypoints() const { return waypoints_; }
  Vec2 pick_point() const { return pick_; }

 private:
  std::vector<double> joint_pose(Vec2 p) const;
  void enter(ExpertPhase phase, double now);

  SceneSetup setup_;
  ExpertConfig cfg_;
  Vec2 pick_, lift_, place_, retreat_;
  std::vector<std::vector<double>> waypoints_;
  std::vector<double> durations_;
  ExpertPhase phase_ = ExpertPhase::approach;
  double phase_start_ = 0.0;
  double grip_angle_ = 0.0;  // gripper target
  double grip_target_ = 0.0;
  double grip_reached_at_ = -1.0;
  double release_from_ = 0.0;
};

// ---------------------------------------------------------------------------
// Demonstrations and quality gate

struct QualityGate {
  double tracking_limit = 0.01;  // rad, max |theta_l - theta_f| after `transient`
  double transient = 0.2;        // s
  double reaction_limit = 0.05;  // resting |tau_l + tau_f| / peak |tau_f|
  // Action-reaction is judged only at rest: every joint of both arms slower
  // than `rest_speed` and `rest_accel` for `rest_window` seconds, and no joint's Coulomb sign
  // changed within that window (the observers lag a friction switch).
  double rest_speed = 0.01;   // rad/s
  double rest_accel = 0.03;   // rad/s^2; bounds the inertial share of the residual
  double rest_window = 0.05;  // s, five observer time constants at g_dob = 100
  double reaction_floor = 0.01;  // N m, absolute slack for near-zero peaks
};

struct GateReport {
  bool passed = false;
  double tracking_error = 0.0;  // rad
  double reaction_ratio = 0.0;
  int rest_samples = 0;  // 1 kHz samples the action-reaction check used
  std::string diagnostic;
};

/// Streams 1 kHz bilateral samples and evaluates the gate at the end.
class GateMonitor {
 public:
  explicit GateMonitor(QualityGate gate) : gate_(gate) {}
  void observe(const SceneState& scene, std::span<const ObserverState> obs_l,
               std::span<const ObserverState> obs_f);
  GateReport report() const;

 private:
  QualityGate gate_;
  double tracking_ = 0.0;
  double reaction_ = 0.0;
  double peak_ = 0.0;
  double rest_since_ = -1.0;
  int rest_samples_ = 0;
  std::vector<double> signs_;
  std::vector<double> velocities_;
  double last_time_ = 0.0;
};

/// Records 100 Hz samples (follower and leader channels with reaction
/// torques, both camera frames) from a running simulation.
class EpisodeRecorder {
 public:
  EpisodeRecorder(const SceneSetup& setup, int control_rate = 1000, int sample_rate = 100);
  void sample(const SceneState& scene, std::span<const ObserverState> obs_l,
              std::span<const ObserverState> obs_f);
  std::size_t ticks() const { return episode_.follower_series.size() / width_; }
  /// Finalizes stats and timestamps; `success` and `seed` go into the metadata.
  Episode finish(bool success, std::uint64_t seed, const std::string& source);
  void clear();

 private:
  SceneRenderer renderer_;
  ObjectSpec object_;
  TaskKind task_;
  std::size_t width_;
  Episode episode_;
};

struct DemoResult {
  Episode episode;
  bool success = false;
  PhaseFlags phases;
  GateReport gate;
  std::string failure;  // empty on success
  double duration = 0.0;
  /// Per-phase maxima of |recorded follower torque| per joint, 1 kHz.
  std::vector<std::vector<double>> phase_peak_torque;
};

/// Runs one scripted demonstration. The object is placed at its initial
/// position plus a seeded jitter of up to `object_jitter` per axis.
DemoResult run_demonstration(const SceneSetup& setup, const ExpertConfig& expert,
                             std::uint64_t seed, double object_jitter = 0.005,
                             const QualityGate& gate = {});

struct CollectOptions {
  int episodes = 2;
  std::vector<ObjectSpec> objects;
  std::filesystem::path out_dir;
  std::uint64_t seed = 0;
  ExpertConfig expert;
  QualityGate gate;
  double object_jitter = 0.005;
  int max_attempts_per_episode = 3;
  std::ostream* log = nullptr;
};

struct CollectReport {
  std::vector<std::filesystem::path> saved;
  std::vector<std::string> discarded;  // one diagnostic per rejected attempt
  std::size_t total_ticks = 0;
};

/// Episode i uses objects[i % objects.size()] and is saved as
/// out_dir/episode_%04d. Failed or gated-out attempts are logged and retried
/// with the next seed; throws ExpertError when an episode cannot be obtained.
CollectReport collect(const SceneSetup& base, const CollectOptions& options);

// ---------------------------------------------------------------------------
// Autonomous execution

enum class ChunkMode { chunk_serial, temporal_ensemble };
const char* to_string(ChunkMode mode);
ChunkMode chunk_mode_from_string(const std::string& s);

struct ChunkSchedule {
  int k = 20;
  ChunkMode mode = ChunkMode::chunk_serial;
  double ensemble_decay = 0.1;  // m; weight exp(-m * age)

  void validate() const;
};

/// Normalized temporal-ensemble weights for chunk predictions of the given ages.
std::vector<double> ensemble_weights(std::span<const int> ages, double m);

/// Anything that maps an observation to the next k leader rows (raw units).
class ChunkSource {
 public:
  virtual ~ChunkSource() = default;
  virtual ActionChunk predict(const SampledObservation& raw_obs, int tick) = 0;
  virtual int chunk_length() const = 0;
  /// The executor replaces the torque command with 0 when this is false.
  virtual bool uses_force() const { return true; }
};

class PolicySource : public ChunkSource {
 public:
  explicit PolicySource(const BiActPolicy& policy) : policy_(policy) {}
  ActionChunk predict(const SampledObservation& raw_obs, int tick) override;
  int chunk_length() const override { return policy_.config().chunk_k; }
  bool uses_force() const override { return policy_.config().use_force; }

 private:
  const BiActPolicy& policy_;
};

/// Emits the recorded leader rows of an episode, padding past the end by
/// repeating the final row.
class ReplaySource : public ChunkSource {
 public:
  ReplaySource(const Episode& episode, int k) : episode_(episode), k_(k) {}
  ActionChunk predict(const SampledObservation& raw_obs, int tick) override;
  int chunk_length() const override { return k_; }

 private:
  const Episode& episode_;
  int k_;
};

struct TrajectoryRow {
  int tick = 0;
  double t = 0.0;
  std::vector<double> follower_angle;
  std::vector<double> command_angle;
  std::vector<double> command_torque;
  Vec2 ee;
  Vec2 object;
  bool held = false;
};

struct ExecutionResult {
  bool success = false;
  bool aborted = false;  // non-finite model output
  std::string abort_reason;
  PhaseFlags phases;
  int ticks = 0;
  std::int64_t plant_steps = 0;
  std::vector<int> inference_ticks;
  double max_inference_ms = 0.0;
  double mean_inference_ms = 0.0;
  std::vector<TrajectoryRow> trajectory;
  /// Largest number of plant steps seen between two ticks (always == substeps).
  int max_substeps_per_tick = 0;
  int min_substeps_per_tick = 0;
};

struct ExecutionOptions {
  /// Tick budget; 0 uses task.time_limit.
  int max_ticks = 0;
  /// Stop early once the task is complete and the arm is clear of the object.
  bool stop_on_success = false;
  /// Seeded jitter of the initial object position (per axis, uniform).
  double object_jitter = 0.0;
  std::uint64_t seed = 0;
  /// Called with the scene at the start of every tick.
  std::function<void(const SceneState&)> on_tick;
};

/// The follower runs alone: the leader arm is absent from the scene state
/// (its joint vector is empty), and commands come only from `source`.
ExecutionResult execute_autonomous(const SceneSetup& setup, ChunkSource& source,
                                   const ChunkSchedule& schedule,
                                   const ExecutionOptions& options = {});

void write_trajectory_csv(std::ostream& os, const std::vector<TrajectoryRow>& rows);

/// Initial scene with the object shifted by a seeded jitter in [-j, j]^2.
SceneState jittered_initial_state(const Plant& plant, double jitter, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Evaluation and force ablation

struct TrialRecord {
  std::string object;
  int trial = 0;
  std::uint64_t seed = 0;
  bool success = false;
  bool aborted = false;
  PhaseFlags phases;
  double max_inference_ms = 0.0;
};

struct ObjectSummary {
  std::string object;
  int trials = 0;
  int picked = 0, moved = 0, placed = 0, successes = 0;
};

struct EvalReport {
  std::string label;
  std::vector<TrialRecord> trials;
  std::vector<ObjectSummary> summary() const;
  int successes() const;
  nlohmann::json to_json() const;
};

struct EvalOptions {
  int trials = 10;
  std::uint64_t seed = 0;
  int jobs = 1;
  double object_jitter = 0.005;
  ChunkSchedule schedule;
  /// When set, writes <dir>/<label>_<object>_<trial>.csv per trial.
  std::optional<std::filesystem::path> trajectory_dir;
  std::string label = "eval";
};

/// Runs `trials` seeded episodes per object; trials fan out over `jobs` threads.
EvalReport evaluate_policy(const BiActPolicy& policy, const SceneSetup& base,
                           const std::vector<ObjectSpec>& objects, const EvalOptions& options);

struct AblationConfig {
  PolicyConfig model;
  int train_steps = 3000;
  std::uint64_t seed = 0;
  std::vector<ObjectSpec> eval_objects;
  EvalOptions eval;
  std::ostream* log = nullptr;
};

struct AblationReport {
  EvalReport full;
  EvalReport without_force;
  std::size_t full_parameters = 0;
  std::size_t without_force_parameters = 0;
  bool torque_inputs_zeroed = true;  // checked on every training batch
  nlohmann::json to_json() const;
};

/// Trains the full and w/o-force variants with the same seed and data, then
/// evaluates both on `eval_objects` with paired trial seeds.
AblationReport ablation_run(const Dataset& data, const SceneSetup& base,
                            const AblationConfig& config);

/// One row per variant and object: Pick/Move/Place/Total in percent.
void print_ablation_table(std::ostream& os, const AblationReport& report);

}  // namespace biact
