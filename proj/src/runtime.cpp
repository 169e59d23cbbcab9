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

#include "biact/runtime.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "biact/seeding.hpp"

namespace biact {

namespace {

using json = nlohmann::json;

double min_jerk(double s) {
  s = std::clamp(s, 0.0, 1.0);
  return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
}

std::vector<double> lerp(const std::vector<double>& a, const std::vector<double>& b, double s) {
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + (b[i] - a[i]) * s;
  return out;
}

std::vector<double> tau_res(std::span<const ObserverState> obs) {
  std::vector<double> out(obs.size());
  for (std::size_t i = 0; i < obs.size(); ++i) out[i] = obs[i].tau_res;
  return out;
}

std::vector<double> packed_state(std::span<const JointState> joints,
                                 std::span<const ObserverState> obs) {
  const auto torques = tau_res(obs);
  return pack_channels(channels_from(joints, torques));
}

RenderSpec render_for(const SceneSetup& setup) {
  RenderSpec r = setup.render;
  r.place_center = setup.task.place_center;
  r.place_radius = setup.task.place_radius;
  return r;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t");
  const auto e = s.find_last_not_of(" \t");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

}  // namespace

// ---------------------------------------------------------------------------

void TaskSpec::validate() const {
  if (!(place_radius > 0.0)) throw std::invalid_argument("TaskSpec: place_radius must be > 0");
  if (!(time_limit > 0.0)) throw std::invalid_argument("TaskSpec: time_limit must be > 0");
  if (task != TaskKind::pick_place) {
    throw std::invalid_argument("TaskSpec: only the pick_place task is simulated");
  }
}

void SceneSetup::validate() const {
  arm.validate();
  gains.validate();
  if (gains.joints() != static_cast<std::size_t>(arm.joints())) {
    throw DimensionError("SceneSetup: gains cover " + std::to_string(gains.joints()) +
                         " joints, arm has " + std::to_string(arm.joints()));
  }
  scene.validate();
  object.validate();
  task.validate();
  render.validate();
  if (substeps < 1) throw std::invalid_argument("SceneSetup: substeps must be >= 1");
}

std::vector<ObjectSpec> object_catalog() {
  // Hardness scale in N/m: very low 60, low 150, medium 300, high 800, very high 2000.
  auto make = [](const char* name, double grams, double size_mm, double k) {
    ObjectSpec o;
    o.name = name;
    o.mass = grams / 1000.0;
    o.radius = size_mm / 2000.0;
    o.contact_stiffness = k;
    o.crush_force = 8.0;
    return o;
  };
  return {
      make("foam_ball", 3, 40, 800),          make("softball", 30, 66, 60),
      make("table_tennis", 2, 40, 2000),      make("eye_cream", 24, 40, 2000),
      make("canele", 86, 50, 150),            make("soccer", 21, 61, 150),
      make("honey_bottle", 79, 40, 2000),     make("bell_pepper", 15, 49, 2000),
      make("glue_jar", 63, 45, 300),
  };
}

ObjectSpec parse_object_spec(const std::string& text) {
  const auto colon = text.find(':');
  const std::string name = trim(text.substr(0, colon));
  ObjectSpec spec;
  bool found = false;
  for (const auto& o : object_catalog()) {
    if (o.name == name) {
      spec = o;
      found = true;
    }
  }
  if (!found && colon == std::string::npos) {
    std::string names;
    for (const auto& o : object_catalog()) names += (names.empty() ? "" : ", ") + o.name;
    throw std::invalid_argument("unknown object '" + name + "' (known: " + names +
                                "; or give name:mass=..,stiffness=..,radius=..,crush=..)");
  }
  spec.name = name;
  if (colon != std::string::npos) {
    std::stringstream ss(text.substr(colon + 1));
    std::string item;
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument("object override '" + item + "' is not key=value");
      }
      const std::string key = trim(item.substr(0, eq));
      if (key != "mass" && key != "stiffness" && key != "radius" && key != "crush") {
        throw std::invalid_argument("unknown object key '" + key +
                                    "' (use mass, stiffness, radius, crush)");
      }
      double value = 0.0;
      try {
        value = std::stod(item.substr(eq + 1));
      } catch (const std::exception&) {
        throw std::invalid_argument("object override '" + item + "' has no numeric value");
      }
      if (key == "mass") {
        spec.mass = value;
      } else if (key == "stiffness") {
        spec.contact_stiffness = value;
      } else if (key == "radius") {
        spec.radius = value;
      } else {
        spec.crush_force = value;
      }
    }
  }
  spec.validate();
  return spec;
}

// ---------------------------------------------------------------------------

bool evaluate_success(const SceneState& scene, const TaskSpec& task) {
  if (scene.object_crushed || scene.object_held || !scene.object_present) return false;
  return distance(scene.object_position, task.place_center) <= task.place_radius;
}

void PhaseTracker::observe(const SceneState& scene) {
  if (!scene.object_held || scene.object_crushed) return;
  picked_ = true;
  if (distance(scene.object_position, task_.place_center) <= task_.place_radius) moved_ = true;
}

PhaseFlags PhaseTracker::finish(const SceneState& final_scene) const {
  PhaseFlags f;
  f.picked = picked_;
  f.moved = moved_;
  f.crushed = final_scene.object_crushed;
  f.placed = evaluate_success(final_scene, task_);
  f.final_distance = distance(final_scene.object_position, task_.place_center);
  return f;
}

// ---------------------------------------------------------------------------

const char* to_string(ExpertPhase phase) {
  switch (phase) {
    case ExpertPhase::approach: return "approach";
    case ExpertPhase::settle: return "settle";
    case ExpertPhase::grip: return "grip";
    case ExpertPhase::lift: return "lift";
    case ExpertPhase::transport: return "transport";
    case ExpertPhase::release: return "release";
    case ExpertPhase::retreat: return "retreat";
    case ExpertPhase::done: return "done";
  }
  return "?";
}

void ExpertConfig::validate() const {
  const double positive[] = {approach_time, settle_time, grip_rate, grip_ramp_time,
                             grip_margin, lift_time,
                             transport_time, release_time, retreat_time};
  for (double v : positive) {
    if (!(v > 0.0)) throw std::invalid_argument("ExpertConfig: durations and rates must be > 0");
  }
  if (waypoint_jitter < 0.0 || timing_jitter < 0.0 || grip_dwell < 0.0 || min_grip_force < 0.0 ||
      grip_sense_delay < 0.0 || final_hold < 0.0) {
    throw std::invalid_argument("ExpertConfig: jitters and dwell must be >= 0");
  }
  if (timing_jitter >= std::min({approach_time, lift_time, transport_time, retreat_time})) {
    throw std::invalid_argument("ExpertConfig: timing_jitter exceeds a segment duration");
  }
}

ScriptedExpert::ScriptedExpert(const SceneSetup& setup, ExpertConfig config,
                               Vec2 object_position, std::uint64_t seed)
    : setup_(setup), cfg_(std::move(config)) {
  cfg_.validate();
  if (setup_.arm.dof != 2) throw ExpertError("scripted expert needs the planar 2-link arm");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> wj(-cfg_.waypoint_jitter, cfg_.waypoint_jitter);
  std::uniform_real_distribution<double> tj(-cfg_.timing_jitter, cfg_.timing_jitter);
  auto jitter = [&](Vec2 p) { return Vec2{p.x + wj(rng), p.y + wj(rng)}; };

  pick_ = jitter(object_position);
  const double r = std::hypot(pick_.x, pick_.y);
  lift_ = Vec2{pick_.x * (1.0 - cfg_.lift_distance / r), pick_.y * (1.0 - cfg_.lift_distance / r)};
  place_ = jitter(setup_.task.place_center);
  retreat_ = jitter(cfg_.retreat_position);

  const auto n = static_cast<std::size_t>(setup_.arm.joints());
  waypoints_.push_back(setup_.arm.home_angles);
  for (Vec2 p : {pick_, lift_, place_, retreat_}) waypoints_.push_back(joint_pose(p));
  for (auto& w : waypoints_) w.resize(n, 0.0);

  durations_ = {cfg_.approach_time + tj(rng), cfg_.lift_time + tj(rng) * 0.5,
                cfg_.transport_time + tj(rng), cfg_.retreat_time + tj(rng)};
  grip_target_ = std::max(cfg_.grip_margin * hold_force_threshold(setup_.object, setup_.scene),
                          cfg_.min_grip_force);
}

std::vector<double> ScriptedExpert::joint_pose(Vec2 p) const {
  const auto q = inverse_kinematics_2link(p.x, p.y, setup_.arm);
  if (!q) {
    std::ostringstream os;
    os << "waypoint (" << p.x << ", " << p.y << ") is outside the workspace";
    throw ExpertError(os.str());
  }
  for (int i = 0; i < 2; ++i) {
    const double a = i == 0 ? q->first : q->second;
    if (std::abs(a) > setup_.arm.joint_limits[static_cast<std::size_t>(i)]) {
      throw ExpertError("waypoint needs a joint beyond its limit");
    }
  }
  return {q->first, q->second, 0.0};
}

void ScriptedExpert::enter(ExpertPhase phase, double now) {
  phase_ = phase;
  phase_start_ = now;
}

std::vector<double> ScriptedExpert::step(const SceneState& scene, double felt_gripper_torque) {
  const double t = scene.time;
  const double el = t - phase_start_;
  const auto g = static_cast<std::size_t>(setup_.arm.gripper_index());
  auto segment = [&](int from, int to, double duration) {
    auto q = lerp(waypoints_[static_cast<std::size_t>(from)],
                  waypoints_[static_cast<std::size_t>(to)], min_jerk(el / duration));
    q[g] = grip_angle_;
    return q;
  };

  switch (phase_) {
    case ExpertPhase::approach:
      if (el >= durations_[0]) {
        enter(ExpertPhase::settle, t);
        return step(scene, felt_gripper_torque);
      }
      return segment(0, 1, durations_[0]);
    case ExpertPhase::settle:
      if (el >= cfg_.settle_time) {
        enter(ExpertPhase::grip, t);
        return step(scene, felt_gripper_torque);
      }
      return segment(1, 1, 1.0);
    case ExpertPhase::grip: {
      // The leader's gripper load is the felt squeeze: contact force times the
      // aperture lever, with the reaction sign flipped across the coupling.
      const double felt = -felt_gripper_torque / setup_.scene.gripper_aperture_per_rad;
      if (grip_reached_at_ < 0.0) {
        if (el >= cfg_.grip_sense_delay && felt >= grip_target_) {
          // Back the target off to the angle that holds the target force
          // against the operator's own spring.
          const double stiffness = 2.0 * setup_.gains.j_nominal[g] / setup_.gains.kf *
                                   cfg_.op.bandwidth * cfg_.op.bandwidth;
          grip_angle_ = scene.leader[g].angle +
                        grip_target_ * setup_.scene.gripper_aperture_per_rad / stiffness;
          grip_reached_at_ = t;
        } else {
          const double ta = cfg_.grip_ramp_time;
          grip_angle_ = el < ta ? cfg_.grip_rate * el * el / (2.0 * ta)
                                : cfg_.grip_rate * (el - 0.5 * ta);
          if (grip_angle_ > setup_.arm.joint_limits[g]) {
            throw ExpertError("grip: gripper closed fully without feeling the object");
          }
        }
      } else if (t - grip_reached_at_ >= cfg_.grip_dwell) {
        enter(ExpertPhase::lift, t);
        return step(scene, felt_gripper_torque);
      }
      return segment(1, 1, 1.0);
    }
    case ExpertPhase::lift:
      if (el >= durations_[1]) {
        enter(ExpertPhase::transport, t);
        return step(scene, felt_gripper_torque);
      }
      return segment(1, 2, durations_[1]);
    case ExpertPhase::transport:
      if (el >= durations_[2]) {
        enter(ExpertPhase::release, t);
        release_from_ = grip_angle_;
        return step(scene, felt_gripper_torque);
      }
      return segment(2, 3, durations_[2]);
    case ExpertPhase::release:
      if (el >= cfg_.release_time) {
        grip_angle_ = 0.0;
        enter(ExpertPhase::retreat, t);
        return step(scene, felt_gripper_torque);
      }
      grip_angle_ = release_from_ * (1.0 - min_jerk(el / cfg_.release_time));
      return segment(3, 3, 1.0);
    case ExpertPhase::retreat:
      if (el >= durations_[3] + cfg_.final_hold) {
        enter(ExpertPhase::done, t);
        return step(scene, felt_gripper_torque);
      }
      return segment(3, 4, durations_[3]);
    case ExpertPhase::done:
      return segment(4, 4, 1.0);
  }
  return waypoints_.back();
}

// ---------------------------------------------------------------------------

void GateMonitor::observe(const SceneState& scene, std::span<const ObserverState> obs_l,
                          std::span<const ObserverState> obs_f) {
  bool resting = true;
  const std::size_t n = scene.follower.size();
  signs_.resize(2 * n, 0.0);
  const bool first = velocities_.empty();
  velocities_.resize(2 * n, 0.0);
  const double dt = scene.time - last_time_;
  last_time_ = scene.time;
  for (std::size_t i = 0; i < n; ++i) {
    const double vl = scene.leader[i].velocity;
    const double vf = scene.follower[i].velocity;
    if (first || !(dt > 0.0) || std::abs(vl - velocities_[i]) > gate_.rest_accel * dt ||
        std::abs(vf - velocities_[n + i]) > gate_.rest_accel * dt) {
      resting = false;
    }
    velocities_[i] = vl;
    velocities_[n + i] = vf;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double sl = coulomb_sign(scene.leader[i].velocity);
    const double sf = coulomb_sign(scene.follower[i].velocity);
    if (sl != signs_[i] || sf != signs_[n + i]) resting = false;
    signs_[i] = sl;
    signs_[n + i] = sf;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (scene.time >= gate_.transient) {
      tracking_ = std::max(tracking_, std::abs(scene.leader[i].angle - scene.follower[i].angle));
    }
    peak_ = std::max(peak_, std::abs(obs_f[i].tau_res));
    if (std::abs(scene.leader[i].velocity) > gate_.rest_speed ||
        std::abs(scene.follower[i].velocity) > gate_.rest_speed) {
      resting = false;
    }
  }
  if (!resting || scene.time < gate_.transient) {
    rest_since_ = -1.0;
    return;
  }
  if (rest_since_ < 0.0) rest_since_ = scene.time;
  if (scene.time - rest_since_ < gate_.rest_window) return;
  ++rest_samples_;
  for (std::size_t i = 0; i < scene.follower.size(); ++i) {
    reaction_ = std::max(reaction_, std::abs(obs_l[i].tau_res + obs_f[i].tau_res));
  }
}

GateReport GateMonitor::report() const {
  GateReport r;
  r.tracking_error = tracking_;
  r.rest_samples = rest_samples_;
  r.reaction_ratio = reaction_ / std::max(peak_, gate_.reaction_floor / gate_.reaction_limit);
  const bool track_ok = tracking_ < gate_.tracking_limit;
  const bool react_ok = r.reaction_ratio < gate_.reaction_limit;
  r.passed = track_ok && react_ok;
  std::ostringstream os;
  if (!track_ok) {
    os << "position tracking " << tracking_ << " rad >= " << gate_.tracking_limit << " rad";
  }
  if (!react_ok) {
    if (!track_ok) os << "; ";
    os << "resting action-reaction residual " << r.reaction_ratio << " of peak >= "
       << gate_.reaction_limit;
  }
  r.diagnostic = os.str();
  return r;
}

EpisodeRecorder::EpisodeRecorder(const SceneSetup& setup, int control_rate, int sample_rate)
    : renderer_(setup.arm, setup.object, setup.scene, render_for(setup)),
      object_(setup.object),
      task_(setup.task.task),
      width_(static_cast<std::size_t>(3 * setup.arm.joints())) {
  episode_.meta.dof_plus_gripper = setup.arm.joints();
  episode_.meta.control_rate = control_rate;
  episode_.meta.sample_rate = sample_rate;
}

void EpisodeRecorder::sample(const SceneState& scene, std::span<const ObserverState> obs_l,
                             std::span<const ObserverState> obs_f) {
  const auto f = packed_state(scene.follower, obs_f);
  const auto l = packed_state(scene.leader, obs_l);
  for (double v : f) episode_.follower_series.push_back(static_cast<float>(v));
  for (double v : l) episode_.leader_series.push_back(static_cast<float>(v));
  episode_.overhead_frames.push_back(renderer_.render(scene, CameraView::overhead));
  episode_.gripper_frames.push_back(renderer_.render(scene, CameraView::gripper));
}

Episode EpisodeRecorder::finish(bool success, std::uint64_t seed, const std::string& source) {
  Episode ep = std::move(episode_);
  ep.meta.object_spec = object_;
  ep.meta.task = task_;
  ep.meta.success = success;
  ep.meta.seed = seed;
  ep.meta.source = source;
  ep.finalize();
  clear();
  return ep;
}

void EpisodeRecorder::clear() {
  const auto meta = episode_.meta;
  episode_ = Episode{};
  episode_.meta.dof_plus_gripper = meta.dof_plus_gripper;
  episode_.meta.control_rate = meta.control_rate;
  episode_.meta.sample_rate = meta.sample_rate;
}

SceneState jittered_initial_state(const Plant& plant, double jitter, std::uint64_t seed) {
  SceneState s = plant.initial_state();
  if (jitter > 0.0) {
    std::mt19937_64 rng(mix_seed(seed, 0x0b7ec7));
    std::uniform_real_distribution<double> u(-jitter, jitter);
    s.object_position.x += u(rng);
    s.object_position.y += u(rng);
  }
  return s;
}

DemoResult run_demonstration(const SceneSetup& setup_in, const ExpertConfig& expert_cfg,
                             std::uint64_t seed, double object_jitter, const QualityGate& gate) {
  setup_in.validate();
  SceneSetup setup = setup_in;
  {
    const Plant probe(setup.arm, setup.object, setup.scene);
    setup.object.initial_position =
        jittered_initial_state(probe, object_jitter, seed).object_position;
  }
  DemoResult out;
  const Plant plant(setup.arm, setup.object, setup.scene);
  BilateralLoop loop(plant, setup.gains);
  ScriptedExpert expert(setup, expert_cfg, setup.object.initial_position, mix_seed(seed, 1));
  EpisodeRecorder recorder(setup);
  GateMonitor monitor(gate);
  PhaseTracker tracker(setup.task);
  const auto n = static_cast<std::size_t>(setup.arm.joints());
  const auto g = static_cast<std::size_t>(setup.arm.gripper_index());
  out.phase_peak_torque.assign(static_cast<std::size_t>(ExpertPhase::done) + 1,
                               std::vector<double>(n, 0.0));

  const auto max_steps =
      static_cast<std::int64_t>(std::llround(setup.task.time_limit / setup.scene.dt));
  try {
    for (std::int64_t step = 0; step < max_steps && !expert.done(); ++step) {
      const SceneState& s = loop.state();
      if (step % setup.substeps == 0) {
        recorder.sample(s, loop.leader_observers(), loop.follower_observers());
        tracker.observe(s);
      }
      const auto targets = expert.step(s, loop.leader_observers()[g].tau_res);
      const auto h = expert_cfg.op.torque(targets, s.leader, setup.gains);
      loop.step(h);
      monitor.observe(loop.state(), loop.leader_observers(), loop.follower_observers());
      auto& peaks = out.phase_peak_torque[static_cast<std::size_t>(expert.phase())];
      for (std::size_t i = 0; i < n; ++i) {
        peaks[i] = std::max(peaks[i], std::abs(loop.follower_observers()[i].tau_res));
      }
    }
  } catch (const ExpertError& e) {
    out.failure = std::string("expert: ") + e.what();
  }
  const SceneState& final_state = loop.state();
  out.duration = final_state.time;
  out.phases = tracker.finish(final_state);
  out.gate = monitor.report();
  out.success = out.failure.empty() && expert.done() && out.phases.placed;
  if (out.failure.empty()) {
    if (!expert.done()) {
      out.failure = "time limit reached in phase " + std::string(to_string(expert.phase()));
    } else if (!out.phases.placed) {
      std::ostringstream os;
      os << "task failed (crushed=" << out.phases.crushed << ", picked=" << out.phases.picked
         << ", distance=" << out.phases.final_distance << " m)";
      out.failure = os.str();
    }
  }
  out.episode = recorder.finish(out.success, seed, "scripted");
  return out;
}

CollectReport collect(const SceneSetup& base, const CollectOptions& options) {
  if (options.episodes < 1) throw std::invalid_argument("collect: episodes must be >= 1");
  if (options.objects.empty()) throw std::invalid_argument("collect: no objects given");
  if (options.out_dir.empty()) throw std::invalid_argument("collect: no output directory");
  std::filesystem::create_directories(options.out_dir);
  CollectReport report;
  std::uint64_t attempt = 0;
  for (int i = 0; i < options.episodes; ++i) {
    SceneSetup setup = base;
    setup.object = options.objects[static_cast<std::size_t>(i) % options.objects.size()];
    bool saved = false;
    for (int a = 0; a < options.max_attempts_per_episode && !saved; ++a, ++attempt) {
      const std::uint64_t seed = mix_seed(options.seed, attempt);
      DemoResult demo =
          run_demonstration(setup, options.expert, seed, options.object_jitter, options.gate);
      std::string reason;
      if (!demo.success) {
        reason = demo.failure;
      } else if (!demo.gate.passed) {
        reason = "quality gate: " + demo.gate.diagnostic;
      }
      if (!reason.empty()) {
        std::ostringstream os;
        os << "episode " << i << " (" << setup.object.name << ", seed " << seed
           << ") discarded: " << reason;
        report.discarded.push_back(os.str());
        if (options.log) *options.log << os.str() << "\n";
        continue;
      }
      char name[32];
      std::snprintf(name, sizeof name, "episode_%04d", i);
      const auto dir = options.out_dir / name;
      save_episode(demo.episode, dir);
      report.saved.push_back(dir);
      report.total_ticks += demo.episode.ticks();
      if (options.log) {
        *options.log << "saved " << dir.string() << " (" << setup.object.name << ", "
                     << demo.episode.ticks() << " ticks, tracking " << demo.gate.tracking_error
                     << " rad)\n";
      }
      saved = true;
    }
    if (!saved) {
      throw ExpertError("collect: no acceptable demonstration for episode " + std::to_string(i) +
                        " after " + std::to_string(options.max_attempts_per_episode) +
                        " attempts");
    }
  }
  return report;
}

// ---------------------------------------------------------------------------

const char* to_string(ChunkMode mode) {
  return mode == ChunkMode::chunk_serial ? "chunk_serial" : "temporal_ensemble";
}

ChunkMode chunk_mode_from_string(const std::string& s) {
  if (s == "chunk_serial" || s == "serial") return ChunkMode::chunk_serial;
  if (s == "temporal_ensemble" || s == "ensemble") return ChunkMode::temporal_ensemble;
  throw std::invalid_argument("unknown chunk mode '" + s +
                              "' (use chunk_serial or temporal_ensemble)");
}

void ChunkSchedule::validate() const {
  if (k < 1) throw std::invalid_argument("ChunkSchedule: k must be >= 1");
  if (mode == ChunkMode::temporal_ensemble && !(ensemble_decay > 0.0)) {
    throw std::invalid_argument("ChunkSchedule: ensemble decay m must be > 0");
  }
}

std::vector<double> ensemble_weights(std::span<const int> ages, double m) {
  if (ages.empty()) throw std::invalid_argument("ensemble_weights: no live chunks");
  std::vector<double> w(ages.size());
  double total = 0.0;
  for (std::size_t i = 0; i < ages.size(); ++i) {
    w[i] = std::exp(-m * ages[i]);
    total += w[i];
  }
  for (double& x : w) x /= total;
  return w;
}

ActionChunk PolicySource::predict(const SampledObservation& raw_obs, int) {
  return policy_.infer(raw_obs);
}

ActionChunk ReplaySource::predict(const SampledObservation&, int tick) {
  ActionChunk c;
  c.k = k_;
  c.width = episode_.width();
  const std::size_t last = episode_.ticks() - 1;
  for (int r = 0; r < k_; ++r) {
    const auto row = episode_.leader_row(std::min(static_cast<std::size_t>(tick + r), last));
    c.raw.insert(c.raw.end(), row.begin(), row.end());
  }
  return c;
}

ExecutionResult execute_autonomous(const SceneSetup& setup, ChunkSource& source,
                                   const ChunkSchedule& schedule,
                                   const ExecutionOptions& options) {
  setup.validate();
  schedule.validate();
  if (schedule.k > source.chunk_length()) {
    throw std::invalid_argument("execute_autonomous: schedule k " + std::to_string(schedule.k) +
                                " exceeds the source chunk length " +
                                std::to_string(source.chunk_length()));
  }
  const Plant plant(setup.arm, setup.object, setup.scene);
  const SceneRenderer renderer(setup.arm, setup.object, setup.scene, render_for(setup));
  const auto n = static_cast<std::size_t>(setup.arm.joints());
  const double dt = setup.scene.dt;

  SceneState s = jittered_initial_state(plant, options.object_jitter, options.seed);
  s.leader.clear();  // no leader arm in autonomous mode
  std::vector<ObserverState> obs_f(n);
  PhaseTracker tracker(setup.task);

  ExecutionResult r;
  const int T = options.max_ticks > 0
                    ? options.max_ticks
                    : static_cast<int>(std::llround(setup.task.time_limit / (dt * setup.substeps)));
  struct Live {
    int start;
    ActionChunk chunk;
  };
  std::vector<Live> live;
  double inference_total_ms = 0.0;
  r.min_substeps_per_tick = setup.substeps;

  for (int tick = 0; tick < T; ++tick) {
    if (options.on_tick) options.on_tick(s);
    SampledObservation obs;
    obs.timestamp = s.time;
    obs.follower_state = packed_state(s.follower, obs_f);
    obs.overhead = renderer.render(s, CameraView::overhead);
    obs.gripper_view = renderer.render(s, CameraView::gripper);

    const bool infer_now =
        schedule.mode == ChunkMode::temporal_ensemble || tick % schedule.k == 0;
    if (infer_now) {
      const auto t0 = std::chrono::steady_clock::now();
      ActionChunk c = source.predict(obs, tick);
      const double ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      r.max_inference_ms = std::max(r.max_inference_ms, ms);
      inference_total_ms += ms;
      r.inference_ticks.push_back(tick);
      if (c.width != 3 * n || c.raw.size() < static_cast<std::size_t>(schedule.k) * c.width) {
        throw ShapeError("execute_autonomous: source produced a chunk of the wrong shape");
      }
      if (schedule.mode == ChunkMode::chunk_serial) live.clear();
      live.push_back({tick, std::move(c)});
    }
    std::erase_if(live, [&](const Live& l) { return tick - l.start >= schedule.k; });

    std::vector<double> row(3 * n, 0.0);
    if (schedule.mode == ChunkMode::chunk_serial) {
      const auto src = live.back().chunk.raw_row(tick - live.back().start);
      row.assign(src.begin(), src.end());
    } else {
      std::vector<int> ages;
      for (const auto& l : live) ages.push_back(tick - l.start);
      const auto w = ensemble_weights(ages, schedule.ensemble_decay);
      for (std::size_t c = 0; c < live.size(); ++c) {
        const auto src = live[c].chunk.raw_row(ages[c]);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += w[c] * src[j];
      }
    }
    if (!std::all_of(row.begin(), row.end(), [](double v) { return std::isfinite(v); })) {
      r.aborted = true;
      r.abort_reason = "non-finite command at tick " + std::to_string(tick);
      break;
    }
    const JointChannels ch = unpack_channels(row);
    LeaderCommand cmd{ch.angles, ch.velocities, ch.torques};
    if (!source.uses_force()) std::fill(cmd.torque.begin(), cmd.torque.end(), 0.0);

    TrajectoryRow log;
    log.tick = tick;
    log.t = s.time;
    for (const auto& j : s.follower) log.follower_angle.push_back(j.angle);
    log.command_angle = cmd.angle;
    log.command_torque = cmd.torque;
    log.ee = forward_kinematics(s.follower, setup.arm);
    log.object = s.object_position;
    log.held = s.object_held;
    r.trajectory.push_back(std::move(log));

    const std::int64_t before = s.steps;
    for (int sub = 0; sub < setup.substeps; ++sub) {
      const auto tau = follower_autonomous_step(cmd, s.follower, obs_f, setup.gains, dt);
      s = plant.step_follower(s, tau, dt);
    }
    const int done = static_cast<int>(s.steps - before);
    r.max_substeps_per_tick = std::max(r.max_substeps_per_tick, done);
    r.min_substeps_per_tick = std::min(r.min_substeps_per_tick, done);
    tracker.observe(s);
    r.ticks = tick + 1;
    if (options.stop_on_success && evaluate_success(s, setup.task) &&
        distance(forward_kinematics(s.follower, setup.arm), s.object_position) >
            setup.scene.capture_radius) {
      break;
    }
  }
  r.plant_steps = s.steps;
  r.phases = tracker.finish(s);
  r.success = !r.aborted && r.phases.placed;
  if (!r.inference_ticks.empty()) {
    r.mean_inference_ms = inference_total_ms / static_cast<double>(r.inference_ticks.size());
  }
  return r;
}

void write_trajectory_csv(std::ostream& os, const std::vector<TrajectoryRow>& rows) {
  const std::size_t n = rows.empty() ? 0 : rows.front().follower_angle.size();
  os << "tick,t,ee_x,ee_y,object_x,object_y,held";
  for (std::size_t i = 0; i < n; ++i) os << ",theta_f" << i;
  for (std::size_t i = 0; i < n; ++i) os << ",cmd_theta" << i;
  for (std::size_t i = 0; i < n; ++i) os << ",cmd_tau" << i;
  os << "\n" << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.tick << ',' << r.t << ',' << r.ee.x << ',' << r.ee.y << ',' << r.object.x << ','
       << r.object.y << ',' << (r.held ? 1 : 0);
    for (double v : r.follower_angle) os << ',' << v;
    for (double v : r.command_angle) os << ',' << v;
    for (double v : r.command_torque) os << ',' << v;
    os << "\n";
  }
}

// ---------------------------------------------------------------------------

std::vector<ObjectSummary> EvalReport::summary() const {
  std::vector<ObjectSummary> out;
  std::map<std::string, std::size_t> index;
  for (const auto& t : trials) {
    auto [it, fresh] = index.emplace(t.object, out.size());
    if (fresh) out.push_back(ObjectSummary{t.object});
    auto& s = out[it->second];
    ++s.trials;
    s.picked += t.phases.picked;
    s.moved += t.phases.moved;
    s.placed += t.phases.placed;
    s.successes += t.success;
  }
  return out;
}

int EvalReport::successes() const {
  return static_cast<int>(
      std::count_if(trials.begin(), trials.end(), [](const TrialRecord& t) { return t.success; }));
}

json EvalReport::to_json() const {
  json objects = json::array();
  for (const auto& s : summary()) {
    objects.push_back({{"object", s.object},
                       {"trials", s.trials},
                       {"pick", s.picked},
                       {"move", s.moved},
                       {"place", s.placed},
                       {"successes", s.successes},
                       {"success_rate", s.trials ? double(s.successes) / s.trials : 0.0}});
  }
  json rows = json::array();
  for (const auto& t : trials) {
    rows.push_back({{"object", t.object},
                    {"trial", t.trial},
                    {"seed", t.seed},
                    {"success", t.success},
                    {"aborted", t.aborted},
                    {"pick", t.phases.picked},
                    {"move", t.phases.moved},
                    {"place", t.phases.placed},
                    {"crushed", t.phases.crushed},
                    {"final_distance", t.phases.final_distance},
                    {"max_inference_ms", t.max_inference_ms}});
  }
  return {{"label", label}, {"objects", objects}, {"trials", rows}};
}

EvalReport evaluate_policy(const BiActPolicy& policy, const SceneSetup& base,
                           const std::vector<ObjectSpec>& objects, const EvalOptions& options) {
  if (options.trials < 1) throw std::invalid_argument("evaluate_policy: trials must be >= 1");
  if (objects.empty()) throw std::invalid_argument("evaluate_policy: no objects");
  if (policy.config().joints != base.arm.joints()) {
    throw ShapeError("evaluate_policy: checkpoint serves " +
                     std::to_string(policy.config().joints) + " joints, scene has " +
                     std::to_string(base.arm.joints()));
  }
  options.schedule.validate();
  if (options.trajectory_dir) std::filesystem::create_directories(*options.trajectory_dir);

  EvalReport report;
  report.label = options.label;
  const std::size_t total = objects.size() * static_cast<std::size_t>(options.trials);
  report.trials.resize(total);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;

  auto worker = [&] {
    for (std::size_t idx = next++; idx < total; idx = next++) {
      try {
        const auto& object = objects[idx / static_cast<std::size_t>(options.trials)];
        const int trial = static_cast<int>(idx % static_cast<std::size_t>(options.trials));
        SceneSetup setup = base;
        setup.object = object;
        ExecutionOptions eo;
        eo.object_jitter = options.object_jitter;
        eo.seed = mix_seed(options.seed, static_cast<std::uint64_t>(trial));
        PolicySource source(policy);
        const ExecutionResult res = execute_autonomous(setup, source, options.schedule, eo);
        TrialRecord& rec = report.trials[idx];
        rec.object = object.name;
        rec.trial = trial;
        rec.seed = eo.seed;
        rec.success = res.success;
        rec.aborted = res.aborted;
        rec.phases = res.phases;
        rec.max_inference_ms = res.max_inference_ms;
        if (options.trajectory_dir) {
          std::ofstream os(*options.trajectory_dir / (options.label + "_" + object.name + "_" +
                                                      std::to_string(trial) + ".csv"));
          write_trajectory_csv(os, res.trajectory);
        }
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next = total;
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(options.jobs, static_cast<int>(total)));
  std::vector<std::thread> pool;
  for (int j = 1; j < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
  return report;
}

json AblationReport::to_json() const {
  return {{"full", full.to_json()},
          {"without_force", without_force.to_json()},
          {"full_parameters", full_parameters},
          {"without_force_parameters", without_force_parameters},
          {"torque_inputs_zeroed", torque_inputs_zeroed}};
}

AblationReport ablation_run(const Dataset& data, const SceneSetup& base,
                            const AblationConfig& config) {
  if (data.episodes().empty()) throw std::invalid_argument("ablation_run: empty dataset");
  {
    std::vector<double> masses;
    for (const auto& e : data.episodes()) masses.push_back(e.meta.object_spec.mass);
    std::sort(masses.begin(), masses.end());
    if (std::unique(masses.begin(), masses.end()) - masses.begin() < 2) {
      throw std::invalid_argument("ablation_run: dataset needs at least two object masses");
    }
  }
  AblationReport report;
  for (bool use_force : {true, false}) {
    PolicyConfig cfg = config.model;
    cfg.use_force = use_force;
    BiActPolicy policy(cfg, data.stats(), config.seed);
    const std::string label = use_force ? "full" : "without_force";
    TrainOptions to;
    to.steps = config.train_steps;
    to.seed = config.seed;
    to.on_step = [&](int step, const TrainMetrics& m, double) {
      if (!use_force) {
        // Re-derive the batch this step consumed and check the torque inputs.
        const Batch b = data.sample_batch(cfg.batch_size, cfg.chunk_k,
                                          mix_seed(config.seed, 2 * static_cast<std::uint64_t>(step)));
        const PolicyInput in = policy.make_input(b);
        const auto S = static_cast<std::size_t>(cfg.state_dim());
        const auto j = static_cast<std::size_t>(cfg.joints);
        for (std::size_t r = 0; r < in.batch(); ++r) {
          for (std::size_t c = 2 * j; c < 3 * j; ++c) {
            if (in.state.data()[r * S + c] != 0.0) report.torque_inputs_zeroed = false;
          }
        }
      }
      if (config.log && (step % 250 == 0 || step + 1 == config.train_steps)) {
        *config.log << label << " step " << step << " loss " << m.loss_total << " l1 "
                    << m.loss_l1 << " kl " << m.loss_kl << "\n";
      }
    };
    train_policy(policy, data, to);
    EvalOptions eo = config.eval;
    eo.label = label;
    eo.seed = config.seed;
    EvalReport r = evaluate_policy(policy, base, config.eval_objects, eo);
    if (use_force) {
      report.full = std::move(r);
      report.full_parameters = policy.parameter_count();
    } else {
      report.without_force = std::move(r);
      report.without_force_parameters = policy.parameter_count();
    }
  }
  return report;
}

void print_ablation_table(std::ostream& os, const AblationReport& report) {
  os << std::left << std::setw(16) << "variant" << std::setw(16) << "object" << std::right
     << std::setw(7) << "Pick" << std::setw(7) << "Move" << std::setw(7) << "Place"
     << std::setw(7) << "Total" << "\n";
  auto pct = [](int a, int n) { return n ? 100.0 * a / n : 0.0; };
  for (const EvalReport* r : {&report.full, &report.without_force}) {
    for (const auto& s : r->summary()) {
      os << std::left << std::setw(16) << r->label << std::setw(16) << s.object << std::right
         << std::fixed << std::setprecision(0) << std::setw(7) << pct(s.picked, s.trials)
         << std::setw(7) << pct(s.moved, s.trials) << std::setw(7) << pct(s.placed, s.trials)
         << std::setw(7) << pct(s.successes, s.trials) << "\n";
    }
  }
  os.unsetf(std::ios::floatfield);
}

}  // namespace biact
