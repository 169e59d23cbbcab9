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
#include <cstdio>
#include <sstream>

#include "biact/episode_store.hpp"
#include "biact/teleop_bridge.hpp"

namespace biact {
namespace {

using ojson = nlohmann::ordered_json;

std::vector<double> angles_of(std::span<const JointState> joints) {
  std::vector<double> out;
  for (const auto& j : joints) out.push_back(j.angle);
  return out;
}

std::vector<double> tau_res_of(std::span<const ObserverState> obs) {
  std::vector<double> out;
  for (const auto& o : obs) out.push_back(o.tau_res);
  return out;
}

const nlohmann::json* finite_number(const nlohmann::json& msg, const char* key) {
  const auto it = msg.find(key);
  if (it == msg.end() || !it->is_number() || !std::isfinite(it->get<double>())) return nullptr;
  return &*it;
}

}  // namespace

bool InboundMailbox::push(Item item) {
  std::lock_guard lock(mutex_);
  if (item.is_target && !items_.empty() && items_.back().is_target &&
      items_.back().client == item.client) {
    items_.back() = std::move(item);
    return true;
  }
  if (items_.size() >= bound_) return false;
  items_.push_back(std::move(item));
  return true;
}

std::vector<InboundMailbox::Item> InboundMailbox::drain() {
  std::lock_guard lock(mutex_);
  std::vector<Item> out(std::make_move_iterator(items_.begin()),
                        std::make_move_iterator(items_.end()));
  items_.clear();
  return out;
}

bool is_target_message(const std::string& text) {
  const auto j = nlohmann::json::parse(text, nullptr, false);
  if (!j.is_object()) return false;
  const auto it = j.find("type");
  return it != j.end() && it->is_string() && it->get<std::string>() == "target";
}

TeleopSession::TeleopSession(SceneSetup setup, TeleopOptions options)
    : setup_(std::move(setup)), options_(std::move(options)) {
  setup_.validate();
  if (setup_.arm.dof != 2) {
    throw std::invalid_argument("teleop: drag targets need the planar 2-link arm (dof 2)");
  }
  if (options_.state_rate < 1) throw std::invalid_argument("teleop: state_rate must be >= 1");
  reset();
}

std::string TeleopSession::hello_frame() {
  return ojson{{"type", "hello"}, {"version", kProtocolVersion}}.dump();
}

std::string TeleopSession::error(const std::string& msg) const {
  return ojson{{"type", "error"}, {"msg", msg}}.dump();
}

void TeleopSession::reset() {
  const Plant plant(setup_.arm, setup_.object, setup_.scene);
  loop_ = std::make_unique<BilateralLoop>(plant, setup_.gains);
  targets_ = setup_.arm.home_angles;
  stop_recording();
}

void TeleopSession::stop_recording() {
  recording_ = false;
  recorder_.reset();
  monitor_.reset();
  record_steps_ = 0;
}

std::vector<std::string> TeleopSession::handle(const std::string& text) {
  const auto msg = nlohmann::json::parse(text, nullptr, false);
  if (msg.is_discarded()) return {error("malformed JSON")};
  if (!msg.is_object()) return {error("message must be a JSON object")};
  const auto type = msg.find("type");
  if (type == msg.end() || !type->is_string()) return {error("message has no string \"type\"")};
  const std::string t = type->get<std::string>();
  if (t == "target") return on_target(msg);
  if (t == "record") return on_record(msg);
  if (t == "reset") {
    reset();
    return {};
  }
  return {error("unknown message type '" + t + "'")};
}

std::vector<std::string> TeleopSession::on_target(const nlohmann::json& msg) {
  const auto* x = finite_number(msg, "x");
  const auto* y = finite_number(msg, "y");
  const auto* grip = finite_number(msg, "grip");
  if (!x || !y || !grip) return {error("target needs finite numbers x, y and grip")};
  const double g = grip->get<double>();
  if (g < 0.0 || g > 1.0) return {error("target grip must lie in [0, 1]")};
  const auto ik = inverse_kinematics_2link(x->get<double>(), y->get<double>(), setup_.arm);
  if (!ik) return {error("target is outside the reachable workspace")};
  const auto& lim = setup_.arm.joint_limits;
  if (std::abs(ik->first) > lim[0] || std::abs(ik->second) > lim[1]) {
    return {error("target needs joint angles beyond the joint limits")};
  }
  const auto gi = static_cast<std::size_t>(setup_.arm.gripper_index());
  targets_[0] = ik->first;
  targets_[1] = ik->second;
  targets_[gi] = g * lim[gi];
  return {};
}

std::vector<std::string> TeleopSession::on_record(const nlohmann::json& msg) {
  const auto it = msg.find("action");
  const std::string action = it != msg.end() && it->is_string() ? it->get<std::string>() : "";
  if (action == "start") {
    if (options_.out_dir.empty()) return {error("recording is disabled (no output directory)")};
    if (recording_) return {error("already recording")};
    SceneSetup at_start = setup_;
    at_start.object.initial_position = scene().object_position;
    recorder_ = std::make_unique<EpisodeRecorder>(at_start);
    monitor_ = std::make_unique<GateMonitor>(options_.gate);
    recording_ = true;
    record_steps_ = 0;
    return {};
  }
  if (action == "discard") {
    if (!recording_) return {error("not recording")};
    stop_recording();
    return {};
  }
  if (action == "stop") {
    if (!recording_) return {error("not recording")};
    const GateReport gate = monitor_->report();
    const std::size_t ticks = recorder_->ticks();
    Episode ep = recorder_->finish(evaluate_success(scene(), setup_.task), 0, "teleop");
    stop_recording();
    if (ticks == 0) return {error("episode is empty")};
    if (!gate.passed) return {error("episode rejected by the quality gate: " + gate.diagnostic)};
    char name[64];
    std::snprintf(name, sizeof(name), "%s_%04d", options_.episode_prefix.c_str(), saved_);
    try {
      save_episode(ep, options_.out_dir / name);
    } catch (const std::exception& e) {
      return {error(std::string("saving the episode failed: ") + e.what())};
    }
    ++saved_;
    return {ojson{{"type", "saved"}, {"episode", name}, {"ticks", ticks}}.dump()};
  }
  return {error("record action must be \"start\", \"stop\" or \"discard\"")};
}

void TeleopSession::step() {
  if (recording_ && record_steps_ % setup_.substeps == 0) {
    recorder_->sample(scene(), loop_->leader_observers(), loop_->follower_observers());
  }
  const auto h = options_.op.torque(targets_, scene().leader, setup_.gains);
  loop_->step(h);
  if (recording_) {
    monitor_->observe(scene(), loop_->leader_observers(), loop_->follower_observers());
    ++record_steps_;
  }
}

std::optional<std::string> TeleopSession::poll_state() const {
  // Frame k falls on the first step at or after k / state_rate seconds.
  const std::int64_t n = scene().steps;
  const auto per_second = static_cast<std::int64_t>(std::llround(1.0 / setup_.scene.dt));
  const std::int64_t r = options_.state_rate;
  if (n == 0 || (n * r) / per_second != ((n - 1) * r) / per_second) return state_frame();
  return std::nullopt;
}

std::string TeleopSession::state_frame() const {
  const SceneState& s = scene();
  return ojson{{"type", "state"},
               {"t", s.time},
               {"leader", angles_of(s.leader)},
               {"follower", angles_of(s.follower)},
               {"tau_res_l", tau_res_of(loop_->leader_observers())},
               {"tau_res_f", tau_res_of(loop_->follower_observers())},
               {"object", {s.object_position.x, s.object_position.y}},
               {"held", s.object_held},
               {"recording", recording_}}
      .dump();
}

}  // namespace biact
