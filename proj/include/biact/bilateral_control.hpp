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

// Per-axis position/force controller for a leader/follower pair.
//
// Each joint carries a first-order disturbance observer (DOB) and a reaction
// torque observer (RFOB). The 4-channel coupling drives the position
// difference to zero through a half-gain servo on each arm and the torque sum
// to zero through a common-mode force servo. With the DOB feeding its
// estimate forward, each joint behaves like the nominal inertia and the
// closed loop splits into
//
//   differential mode:  e_p'' + kd e_p' + kp e_p = 0
//   common mode:        J_n (theta_l'' + theta_f'') = -kf (tau_res_l + tau_res_f)

#pragma once

#include <span>
#include <vector>

#include "biact/arm_dynamics.hpp"

namespace biact {

struct ObserverState {
  double z = 0.0;            // DOB low-pass integrator
  double tau_dis_hat = 0.0;  // disturbance estimate
  double tau_res = 0.0;      // reaction torque estimate
};

struct ControlGains {
  double kp = 400.0;
  double kd = 40.0;
  double kf = 1.0;
  double g_dob = 100.0;
  // Nominal plant, one entry per joint (dof + 1).
  std::vector<double> j_nominal;
  std::vector<double> d_nominal;
  std::vector<double> coulomb_nominal;
  std::vector<double> gravity_nominal_scale;

  /// Default gains with nominal parameters copied from the true plant.
  static ControlGains matching(const ArmConfig& arm);

  std::size_t joints() const { return j_nominal.size(); }
  void validate() const;
};

/// Target for the follower in place of a live leader: angle, velocity and the
/// leader-side reaction torque, per joint.
struct LeaderCommand {
  std::vector<double> angle;
  std::vector<double> velocity;
  std::vector<double> torque;

  std::size_t size() const { return angle.size(); }
  bool finite() const;
};

struct BilateralTorques {
  std::vector<double> leader;
  std::vector<double> follower;
};

/// One DOB update for a single joint; `j_nominal` is that joint's nominal inertia.
ObserverState dob_update(const ObserverState& obs, double tau_ref, double omega, double g_dob,
                         double j_nominal, double dt);

/// Reaction torque = disturbance estimate minus nominal friction and gravity.
/// `theta` is the angle the gravity model is evaluated at (absolute link angle).
ObserverState rfob_update(const ObserverState& obs, double theta, double omega,
                          double d_nominal, double coulomb_nominal, double gravity_nominal_scale);

/// Runs both observers for every joint of one arm after `tau_ref` was emitted.
void update_observers(std::span<ObserverState> obs, std::span<const double> tau_ref,
                      std::span<const JointState> joints, const ControlGains& gains, double dt);

BilateralTorques bilateral_step(std::span<const JointState> leader,
                                std::span<const JointState> follower,
                                std::span<ObserverState> obs_leader,
                                std::span<ObserverState> obs_follower, const ControlGains& gains,
                                double dt);

/// Follower half of the coupling with the leader replaced by `command`.
/// Throws std::invalid_argument on a non-finite command.
std::vector<double> follower_autonomous_step(const LeaderCommand& command,
                                             std::span<const JointState> follower,
                                             std::span<ObserverState> obs_follower,
                                             const ControlGains& gains, double dt);

/// Spring-damper model of an operator (human or scripted expert) pulling each
/// leader joint toward a target. Gains scale with the nominal inertia so every
/// joint sees the same common-mode bandwidth `bandwidth` [rad/s].
struct OperatorModel {
  double bandwidth = 10.0;
  double damping_ratio = 1.0;

  /// Torque the operator applies (positive pushes the joint forward).
  std::vector<double> torque(std::span<const double> targets, std::span<const JointState> leader,
                             const ControlGains& gains) const;
};

/// A leader/follower pair closed through `bilateral_step`, advanced one
/// control period at a time.
class BilateralLoop {
 public:
  BilateralLoop(Plant plant, ControlGains gains);

  /// One control period: computes torques, then steps the plant. `operator_torque`
  /// is applied to the leader; `follower_loads` adds environment loads on top of
  /// the object contact the plant resolves itself.
  void step(std::span<const double> operator_torque, std::span<const double> follower_loads = {});

  const Plant& plant() const { return plant_; }
  const ControlGains& gains() const { return gains_; }
  const SceneState& state() const { return state_; }
  SceneState& mutable_state() { return state_; }
  std::span<const ObserverState> leader_observers() const { return obs_leader_; }
  std::span<const ObserverState> follower_observers() const { return obs_follower_; }
  const BilateralTorques& last_torques() const { return last_; }

 private:
  Plant plant_;
  ControlGains gains_;
  SceneState state_;
  std::vector<ObserverState> obs_leader_;
  std::vector<ObserverState> obs_follower_;
  BilateralTorques last_;
};

/// Backward-difference velocity from encoder angles, for runs that do not
/// trust the plant's velocity.
class EncoderDifferentiator {
 public:
  explicit EncoderDifferentiator(double dt) : dt_(dt) {}
  std::vector<JointState> apply(std::span<const JointState> joints);

 private:
  double dt_;
  std::vector<double> previous_;
};

}  // namespace biact
