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

#include "biact/arm_dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace biact {

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void require_size(const std::vector<double>& v, std::size_t n, const char* name) {
  if (v.size() != n) {
    throw DimensionError(std::string("ArmConfig.") + name + ": expected " + std::to_string(n) +
                         " entries, got " + std::to_string(v.size()));
  }
}

void require_positive(const std::vector<double>& v, const char* name) {
  for (double x : v) {
    if (!(x > 0.0) || !std::isfinite(x)) {
      throw std::invalid_argument(std::string("ArmConfig.") + name + " must be positive");
    }
  }
}

void require_nonnegative(const std::vector<double>& v, const char* name) {
  for (double x : v) {
    if (!(x >= 0.0) || !std::isfinite(x)) {
      throw std::invalid_argument(std::string("ArmConfig.") + name + " must be nonnegative");
    }
  }
}

}  // namespace

double distance(Vec2 a, Vec2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

double coulomb_sign(double velocity) {
  if (std::abs(velocity) < kCoulombDeadband) return 0.0;
  return sign(velocity);
}

void ArmConfig::validate() const {
  if (dof < 1) throw std::invalid_argument("ArmConfig.dof must be >= 1");
  const auto n = static_cast<std::size_t>(joints());
  require_size(link_lengths, static_cast<std::size_t>(dof), "link_lengths");
  require_size(inertia, n, "inertia");
  require_size(viscous_friction, n, "viscous_friction");
  require_size(coulomb_friction, n, "coulomb_friction");
  require_size(gravity_torque_scale, n, "gravity_torque_scale");
  require_size(joint_limits, n, "joint_limits");
  require_size(torque_limits, n, "torque_limits");
  require_size(home_angles, n, "home_angles");
  require_positive(link_lengths, "link_lengths");
  require_positive(inertia, "inertia");
  require_positive(joint_limits, "joint_limits");
  require_positive(torque_limits, "torque_limits");
  require_nonnegative(viscous_friction, "viscous_friction");
  require_nonnegative(coulomb_friction, "coulomb_friction");
  require_nonnegative(gravity_torque_scale, "gravity_torque_scale");
  for (std::size_t i = 0; i < n; ++i) {
    if (std::abs(home_angles[i]) > joint_limits[i]) {
      throw std::invalid_argument("ArmConfig.home_angles outside joint_limits");
    }
  }
}

ArmConfig ArmConfig::defaults(int dof) {
  if (dof < 1) throw std::invalid_argument("ArmConfig.dof must be >= 1");
  ArmConfig c;
  c.dof = dof;
  const auto n = static_cast<std::size_t>(dof + 1);
  c.link_lengths.assign(static_cast<std::size_t>(dof), 0.4 / dof);
  c.inertia.assign(n, 0.1);
  c.viscous_friction.assign(n, 0.5);
  c.coulomb_friction.assign(n, 0.05);
  c.gravity_torque_scale.assign(n, 0.0);
  c.joint_limits.assign(n, 2.8);
  c.torque_limits.assign(n, 20.0);
  c.home_angles.assign(n, 0.0);
  for (int i = 0; i < dof; ++i) {
    c.gravity_torque_scale[static_cast<std::size_t>(i)] = 0.3 / (i + 1);
  }
  // Gripper: light, low friction, aperture reaches ~5 mm at the limit.
  c.inertia.back() = 0.02;
  c.viscous_friction.back() = 0.05;
  c.coulomb_friction.back() = 0.005;
  c.joint_limits.back() = 0.8;
  c.torque_limits.back() = 2.0;
  if (dof == 2) {
    const auto home = inverse_kinematics_2link(0.18, 0.0, c);
    c.home_angles[0] = home->first;
    c.home_angles[1] = home->second;
  }
  return c;
}

void ObjectSpec::validate() const {
  if (!(mass > 0.0) || !(contact_stiffness > 0.0) || !(radius > 0.0) || !(crush_force > 0.0)) {
    throw std::invalid_argument("ObjectSpec '" + name +
                                "': mass, contact_stiffness, radius and crush_force must be > 0");
  }
}

void SceneConfig::validate() const {
  if (!(hold_coefficient > 0.0) || !(gravity > 0.0) || !(gripper_open_aperture > 0.0) ||
      !(gripper_aperture_per_rad > 0.0) || !(capture_radius > 0.0) || !(dt > 0.0)) {
    throw std::invalid_argument("SceneConfig: all constants must be > 0");
  }
}

Vec2 forward_kinematics(std::span<const double> angles, const ArmConfig& config) {
  if (angles.size() != config.link_lengths.size()) {
    throw DimensionError("forward_kinematics: expected " +
                         std::to_string(config.link_lengths.size()) + " angles, got " +
                         std::to_string(angles.size()));
  }
  Vec2 p;
  double phi = 0.0;
  for (std::size_t i = 0; i < angles.size(); ++i) {
    phi += angles[i];
    p.x += config.link_lengths[i] * std::cos(phi);
    p.y += config.link_lengths[i] * std::sin(phi);
  }
  return p;
}

Vec2 forward_kinematics(std::span<const JointState> joints, const ArmConfig& config) {
  if (joints.size() < static_cast<std::size_t>(config.dof)) {
    throw DimensionError("forward_kinematics: too few joints");
  }
  std::vector<double> angles(static_cast<std::size_t>(config.dof));
  for (std::size_t i = 0; i < angles.size(); ++i) angles[i] = joints[i].angle;
  return forward_kinematics(angles, config);
}

std::vector<double> absolute_angles(std::span<const JointState> joints, int dof) {
  std::vector<double> out(joints.size());
  double phi = 0.0;
  for (std::size_t i = 0; i < joints.size(); ++i) {
    if (static_cast<int>(i) < dof) {
      phi += joints[i].angle;
      out[i] = phi;
    } else {
      out[i] = joints[i].angle;
    }
  }
  return out;
}

std::optional<std::pair<double, double>> inverse_kinematics_2link(double x, double y,
                                                                   const ArmConfig& config) {
  if (config.link_lengths.size() != 2) {
    throw DimensionError("inverse_kinematics_2link: arm must have exactly two links");
  }
  const double l1 = config.link_lengths[0];
  const double l2 = config.link_lengths[1];
  const double r2 = x * x + y * y;
  const double reach = l1 + l2;
  const double inner = l1 - l2;
  if (r2 > reach * reach || r2 < inner * inner) return std::nullopt;
  const double c2 = std::clamp((r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2), -1.0, 1.0);
  const double q2 = std::acos(c2);
  const double q1 = std::atan2(y, x) - std::atan2(l2 * std::sin(q2), l1 + l2 * std::cos(q2));
  return std::make_pair(q1, q2);
}

double gripper_aperture(double gripper_angle, const SceneConfig& scene) {
  return scene.gripper_open_aperture - scene.gripper_aperture_per_rad * gripper_angle;
}

double gripper_contact(double gripper_angle, const ObjectSpec& object, Vec2 ee_position,
                       Vec2 object_position, const SceneConfig& scene) {
  if (distance(ee_position, object_position) > scene.capture_radius) return 0.0;
  const double penetration = 2.0 * object.radius - gripper_aperture(gripper_angle, scene);
  return object.contact_stiffness * std::max(0.0, penetration);
}

double hold_force_threshold(const ObjectSpec& object, const SceneConfig& scene) {
  return scene.hold_coefficient * object.mass * scene.gravity;
}

Plant::Plant(ArmConfig arm, ObjectSpec object, SceneConfig scene)
    : arm_(std::move(arm)), object_(std::move(object)), scene_(scene) {
  arm_.validate();
  object_.validate();
  scene_.validate();
}

SceneState Plant::initial_state() const {
  SceneState s;
  const auto n = static_cast<std::size_t>(arm_.joints());
  s.leader.resize(n);
  s.follower.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s.leader[i].angle = arm_.home_angles[i];
    s.follower[i].angle = arm_.home_angles[i];
  }
  s.object_position = object_.initial_position;
  return s;
}

void Plant::advance_arm(std::vector<JointState>& joints, std::span<const double> torques,
                        std::span<const double> loads, double dt) const {
  const auto abs_angles = absolute_angles(joints, arm_.dof);
  for (std::size_t i = 0; i < joints.size(); ++i) {
    auto& j = joints[i];
    const double limit = arm_.torque_limits[i];
    const double tau = std::clamp(torques[i], -limit, limit);
    const double load = loads.empty() ? 0.0 : loads[i];
    const double gravity = arm_.gravity_torque_scale[i] * std::cos(abs_angles[i]);
    const double inertia = arm_.inertia[i];

    const double smooth =
        j.velocity + dt * (tau - arm_.viscous_friction[i] * j.velocity - gravity - load) / inertia;
    // Coulomb friction may stop a joint but never reverses it within a step.
    double omega = smooth - dt * arm_.coulomb_friction[i] * coulomb_sign(j.velocity) / inertia;
    if (sign(omega) != sign(smooth)) omega = 0.0;

    double theta = j.angle + dt * omega;
    const double jl = arm_.joint_limits[i];
    if (theta > jl) {
      theta = jl;
      omega = std::min(omega, 0.0);
    } else if (theta < -jl) {
      theta = -jl;
      omega = std::max(omega, 0.0);
    }
    j.angle = theta;
    j.velocity = omega;
    j.torque = tau;
  }
}

std::vector<double> Plant::payload_torques(const SceneState& state) const {
  std::vector<double> out(static_cast<std::size_t>(arm_.joints()), 0.0);
  if (!state.object_held) return out;
  const auto abs_angles = absolute_angles(state.follower, arm_.dof);
  const double weight = object_.mass * scene_.gravity;
  // Point mass at the end effector: joint i carries the horizontal lever of links i..dof-1.
  for (int i = 0; i < arm_.dof; ++i) {
    double lever = 0.0;
    for (int j = i; j < arm_.dof; ++j) {
      lever += arm_.link_lengths[static_cast<std::size_t>(j)] *
               std::cos(abs_angles[static_cast<std::size_t>(j)]);
    }
    out[static_cast<std::size_t>(i)] = weight * lever;
  }
  return out;
}

std::vector<double> Plant::follower_contact_loads(const SceneState& state,
                                                  std::span<const double> extra) const {
  auto loads = payload_torques(state);
  if (state.object_present && !state.object_crushed) {
    const Vec2 ee = forward_kinematics(state.follower, arm_);
    const auto g = static_cast<std::size_t>(arm_.gripper_index());
    const double force = gripper_contact(state.follower[g].angle, object_, ee,
                                         state.object_position, scene_);
    loads[g] += force * scene_.gripper_aperture_per_rad;
  }
  if (!extra.empty()) {
    for (std::size_t i = 0; i < loads.size(); ++i) loads[i] += extra[i];
  }
  return loads;
}

void Plant::resolve_grasp(SceneState& next) const {
  if (!next.object_present || next.object_crushed) {
    next.object_held = false;
    next.contact_force = 0.0;
    return;
  }
  const Vec2 ee = forward_kinematics(next.follower, arm_);
  const auto g = static_cast<std::size_t>(arm_.gripper_index());
  const double force =
      gripper_contact(next.follower[g].angle, object_, ee, next.object_position, scene_);
  next.contact_force = force;
  if (force > object_.crush_force) {
    next.object_crushed = true;
    next.object_held = false;
    return;
  }
  next.object_held = force >= hold_force_threshold(object_, scene_);
  if (next.object_held) next.object_position = ee;
}

namespace {

void check_torques(std::span<const double> torques, std::size_t n, const char* which) {
  if (torques.size() != n) {
    throw DimensionError(std::string("step: ") + which + " torques: expected " +
                         std::to_string(n) + " entries, got " + std::to_string(torques.size()));
  }
  for (double t : torques) {
    if (!std::isfinite(t)) {
      throw std::invalid_argument(std::string("step: non-finite ") + which + " torque");
    }
  }
}

void check_loads(std::span<const double> loads, std::size_t n) {
  if (!loads.empty() && loads.size() != n) {
    throw DimensionError("step: external load vector has wrong length");
  }
}

}  // namespace

SceneState Plant::step(const SceneState& state, std::span<const double> leader_torques,
                       std::span<const double> follower_torques, double dt,
                       const ExternalLoads& loads) const {
  const auto n = static_cast<std::size_t>(arm_.joints());
  if (!(dt > 0.0)) throw std::invalid_argument("step: dt must be > 0");
  check_torques(leader_torques, n, "leader");
  check_torques(follower_torques, n, "follower");
  check_loads(loads.leader, n);
  check_loads(loads.follower, n);

  SceneState next = state;
  advance_arm(next.leader, leader_torques, loads.leader, dt);
  const auto follower_loads = follower_contact_loads(state, loads.follower);
  advance_arm(next.follower, follower_torques, follower_loads, dt);
  resolve_grasp(next);
  next.time = state.time + dt;
  next.steps = state.steps + 1;
  return next;
}

SceneState Plant::step_follower(const SceneState& state, std::span<const double> follower_torques,
                                double dt, std::span<const double> follower_loads) const {
  const auto n = static_cast<std::size_t>(arm_.joints());
  if (!(dt > 0.0)) throw std::invalid_argument("step: dt must be > 0");
  check_torques(follower_torques, n, "follower");
  check_loads(follower_loads, n);

  SceneState next = state;
  const auto loads = follower_contact_loads(state, follower_loads);
  advance_arm(next.follower, follower_torques, loads, dt);
  resolve_grasp(next);
  next.time = state.time + dt;
  next.steps = state.steps + 1;
  return next;
}

double Plant::kinetic_energy(std::span<const JointState> joints) const {
  double e = 0.0;
  for (std::size_t i = 0; i < joints.size(); ++i) {
    e += 0.5 * arm_.inertia[i] * joints[i].velocity * joints[i].velocity;
  }
  return e;
}

}  // namespace biact
