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

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace biact {

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

double distance(Vec2 a, Vec2 b);

/// Angle [rad], angular velocity [rad/s] and applied motor torque [N m] of one joint.
struct JointState {
  double angle = 0.0;
  double velocity = 0.0;
  double torque = 0.0;
};

/// Plant description of one planar arm: `dof` revolute joints followed by a
/// single gripper joint. Every per-joint vector holds dof + 1 entries except
/// `link_lengths`, which holds dof.
struct ArmConfig {
  int dof = 2;
  std::vector<double> link_lengths;
  std::vector<double> inertia;
  std::vector<double> viscous_friction;
  std::vector<double> coulomb_friction;
  std::vector<double> gravity_torque_scale;
  std::vector<double> joint_limits;
  std::vector<double> torque_limits;
  std::vector<double> home_angles;

  int joints() const { return dof + 1; }
  int gripper_index() const { return dof; }
  void validate() const;

  static ArmConfig defaults(int dof = 2);
};

struct ObjectSpec {
  std::string name = "object";
  double mass = 0.03;                // kg
  double contact_stiffness = 150.0;  // N/m
  double radius = 0.033;             // m
  double crush_force = 8.0;          // N
  Vec2 initial_position{0.26, -0.1425};

  void validate() const;
};

/// Scene-wide constants shared by the plant and the grasp model.
struct SceneConfig {
  double hold_coefficient = 3.0;  // mu_hold
  double gravity = 9.81;
  double gripper_open_aperture = 0.085;     // finger gap at gripper angle 0 [m]
  double gripper_aperture_per_rad = 0.1;    // closure per radian [m/rad]
  double capture_radius = 0.02;             // fingers engage only this close to the object [m]
  double dt = 0.001;

  void validate() const;
};

struct SceneState {
  double time = 0.0;
  std::int64_t steps = 0;
  std::vector<JointState> leader;
  std::vector<JointState> follower;
  Vec2 object_position;
  bool object_present = true;
  bool object_held = false;
  bool object_crushed = false;
  double contact_force = 0.0;  // gripper contact force at the end of the last step [N]
  std::optional<double> drawer_open_fraction;
};

/// Load torques acting against each joint (same sign convention as friction
/// and gravity). An operator pushing a joint forward with torque h is a load
/// of -h. Empty vectors mean no load.
struct ExternalLoads {
  std::vector<double> leader;
  std::vector<double> follower;
};

/// Velocities below this magnitude [rad/s] count as rest for Coulomb friction.
inline constexpr double kCoulombDeadband = 1e-3;

/// Direction of Coulomb friction: 0 at rest, else the sign of `velocity`.
/// Used by the plant and by every nominal friction model.
double coulomb_sign(double velocity);

Vec2 forward_kinematics(std::span<const double> angles, const ArmConfig& config);
Vec2 forward_kinematics(std::span<const JointState> joints, const ArmConfig& config);

/// Cumulative link angle for every arm joint; the gripper keeps its own angle.
std::vector<double> absolute_angles(std::span<const JointState> joints, int dof);

/// Closed-form elbow-down inverse kinematics for a planar two-link chain.
/// Returns nullopt when (x, y) lies outside the reachable annulus.
std::optional<std::pair<double, double>> inverse_kinematics_2link(double x, double y,
                                                                   const ArmConfig& config);

double gripper_aperture(double gripper_angle, const SceneConfig& scene);

/// Contact force [N] between the fingers and the object. Zero when the object
/// is crushed, absent, or outside the capture radius.
double gripper_contact(double gripper_angle, const ObjectSpec& object, Vec2 ee_position,
                       Vec2 object_position, const SceneConfig& scene);

double hold_force_threshold(const ObjectSpec& object, const SceneConfig& scene);

/// Fixed-step plant for the leader/follower pair and the graspable object.
/// Stepping is a pure function of its inputs.
class Plant {
 public:
  Plant(ArmConfig arm, ObjectSpec object, SceneConfig scene);

  const ArmConfig& arm() const { return arm_; }
  const ObjectSpec& object() const { return object_; }
  const SceneConfig& scene() const { return scene_; }

  SceneState initial_state() const;

  SceneState step(const SceneState& state, std::span<const double> leader_torques,
                  std::span<const double> follower_torques, double dt,
                  const ExternalLoads& loads = {}) const;

  /// Advances only the follower and the object; the leader is left untouched.
  SceneState step_follower(const SceneState& state, std::span<const double> follower_torques,
                           double dt, std::span<const double> follower_loads = {}) const;

  /// Load torques the held object puts on the follower arm joints.
  std::vector<double> payload_torques(const SceneState& state) const;

  double kinetic_energy(std::span<const JointState> joints) const;

 private:
  void advance_arm(std::vector<JointState>& joints, std::span<const double> torques,
                   std::span<const double> loads, double dt) const;
  void resolve_grasp(SceneState& next) const;
  std::vector<double> follower_contact_loads(const SceneState& state,
                                             std::span<const double> extra) const;

  ArmConfig arm_;
  ObjectSpec object_;
  SceneConfig scene_;
};

}  // namespace biact
