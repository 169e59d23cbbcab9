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

#include "biact/bilateral_control.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace biact {

namespace {

void require_joints(std::size_t got, std::size_t want, const char* what) {
  if (got != want) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(want) +
                         " joints, got " + std::to_string(got));
  }
}

}  // namespace

ControlGains ControlGains::matching(const ArmConfig& arm) {
  ControlGains g;
  g.j_nominal = arm.inertia;
  g.d_nominal = arm.viscous_friction;
  g.coulomb_nominal = arm.coulomb_friction;
  g.gravity_nominal_scale = arm.gravity_torque_scale;
  return g;
}

void ControlGains::validate() const {
  if (!(kp > 0.0) || !(kd > 0.0) || !(kf > 0.0) || !(g_dob > 0.0)) {
    throw std::invalid_argument("ControlGains: kp, kd, kf and g_dob must be > 0");
  }
  const auto n = j_nominal.size();
  if (n == 0 || d_nominal.size() != n || coulomb_nominal.size() != n ||
      gravity_nominal_scale.size() != n) {
    throw DimensionError("ControlGains: nominal parameter vectors must share one length");
  }
  for (double j : j_nominal) {
    if (!(j > 0.0)) throw std::invalid_argument("ControlGains: j_nominal must be > 0");
  }
}

bool LeaderCommand::finite() const {
  if (velocity.size() != angle.size() || torque.size() != angle.size()) return false;
  for (std::size_t i = 0; i < angle.size(); ++i) {
    if (!std::isfinite(angle[i]) || !std::isfinite(velocity[i]) || !std::isfinite(torque[i])) {
      return false;
    }
  }
  return true;
}

ObserverState dob_update(const ObserverState& obs, double tau_ref, double omega, double g_dob,
                         double j_nominal, double dt) {
  if (!std::isfinite(tau_ref) || !std::isfinite(omega) || !std::isfinite(obs.z)) {
    throw std::invalid_argument("dob_update: non-finite input");
  }
  if (!(dt > 0.0)) throw std::invalid_argument("dob_update: dt must be > 0");
  ObserverState next = obs;
  const double momentum_term = g_dob * j_nominal * omega;
  next.z = obs.z + dt * g_dob * (tau_ref + momentum_term - obs.z);
  next.tau_dis_hat = next.z - momentum_term;
  return next;
}

ObserverState rfob_update(const ObserverState& obs, double theta, double omega,
                          double d_nominal, double coulomb_nominal,
                          double gravity_nominal_scale) {
  ObserverState next = obs;
  next.tau_res = obs.tau_dis_hat - d_nominal * omega - coulomb_nominal * coulomb_sign(omega) -
                 gravity_nominal_scale * std::cos(theta);
  return next;
}

void update_observers(std::span<ObserverState> obs, std::span<const double> tau_ref,
                      std::span<const JointState> joints, const ControlGains& gains, double dt) {
  const auto n = gains.joints();
  require_joints(obs.size(), n, "update_observers");
  require_joints(tau_ref.size(), n, "update_observers");
  require_joints(joints.size(), n, "update_observers");
  const auto theta = absolute_angles(joints, static_cast<int>(n) - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double omega = joints[i].velocity;
    obs[i] = dob_update(obs[i], tau_ref[i], omega, gains.g_dob, gains.j_nominal[i], dt);
    obs[i] = rfob_update(obs[i], theta[i], omega, gains.d_nominal[i], gains.coulomb_nominal[i],
                         gains.gravity_nominal_scale[i]);
  }
}

BilateralTorques bilateral_step(std::span<const JointState> leader,
                                std::span<const JointState> follower,
                                std::span<ObserverState> obs_leader,
                                std::span<ObserverState> obs_follower, const ControlGains& gains,
                                double dt) {
  const auto n = gains.joints();
  require_joints(leader.size(), n, "bilateral_step(leader)");
  require_joints(follower.size(), n, "bilateral_step(follower)");
  require_joints(obs_leader.size(), n, "bilateral_step(obs_leader)");
  require_joints(obs_follower.size(), n, "bilateral_step(obs_follower)");

  BilateralTorques out{std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const double e_p = leader[i].angle - follower[i].angle;
    const double e_v = leader[i].velocity - follower[i].velocity;
    const double e_f = obs_leader[i].tau_res + obs_follower[i].tau_res;
    const double position = gains.j_nominal[i] * 0.5 * (gains.kp * e_p + gains.kd * e_v);
    const double force = 0.5 * gains.kf * e_f;
    out.leader[i] = -position - force + obs_leader[i].tau_dis_hat;
    out.follower[i] = position - force + obs_follower[i].tau_dis_hat;
  }
  update_observers(obs_leader, out.leader, leader, gains, dt);
  update_observers(obs_follower, out.follower, follower, gains, dt);
  return out;
}

std::vector<double> follower_autonomous_step(const LeaderCommand& command,
                                             std::span<const JointState> follower,
                                             std::span<ObserverState> obs_follower,
                                             const ControlGains& gains, double dt) {
  const auto n = gains.joints();
  require_joints(command.size(), n, "follower_autonomous_step(command)");
  require_joints(follower.size(), n, "follower_autonomous_step(follower)");
  require_joints(obs_follower.size(), n, "follower_autonomous_step(obs_follower)");
  if (!command.finite()) {
    throw std::invalid_argument("follower_autonomous_step: non-finite command");
  }
  std::vector<double> tau(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double e_p = command.angle[i] - follower[i].angle;
    const double e_v = command.velocity[i] - follower[i].velocity;
    const double e_f = command.torque[i] + obs_follower[i].tau_res;
    tau[i] = gains.j_nominal[i] * 0.5 * (gains.kp * e_p + gains.kd * e_v) - 0.5 * gains.kf * e_f +
             obs_follower[i].tau_dis_hat;
  }
  update_observers(obs_follower, tau, follower, gains, dt);
  return tau;
}

std::vector<double> OperatorModel::torque(std::span<const double> targets,
                                          std::span<const JointState> leader,
                                          const ControlGains& gains) const {
  const auto n = gains.joints();
  require_joints(targets.size(), n, "OperatorModel(targets)");
  require_joints(leader.size(), n, "OperatorModel(leader)");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    // Common mode obeys theta'' = kf * h / (2 J_n); pick h so that loop has the
    // requested natural frequency and damping.
    const double scale = 2.0 * gains.j_nominal[i] / gains.kf;
    const double stiffness = scale * bandwidth * bandwidth;
    const double damping = scale * 2.0 * damping_ratio * bandwidth;
    out[i] = stiffness * (targets[i] - leader[i].angle) - damping * leader[i].velocity;
  }
  return out;
}

BilateralLoop::BilateralLoop(Plant plant, ControlGains gains)
    : plant_(std::move(plant)), gains_(std::move(gains)) {
  gains_.validate();
  require_joints(gains_.joints(), static_cast<std::size_t>(plant_.arm().joints()),
                 "BilateralLoop(gains)");
  state_ = plant_.initial_state();
  obs_leader_.assign(gains_.joints(), ObserverState{});
  obs_follower_.assign(gains_.joints(), ObserverState{});
}

void BilateralLoop::step(std::span<const double> operator_torque,
                         std::span<const double> follower_loads) {
  const double dt = plant_.scene().dt;
  last_ = bilateral_step(state_.leader, state_.follower, obs_leader_, obs_follower_, gains_, dt);
  ExternalLoads loads;
  if (!operator_torque.empty()) {
    loads.leader.resize(operator_torque.size());
    for (std::size_t i = 0; i < operator_torque.size(); ++i) loads.leader[i] = -operator_torque[i];
  }
  loads.follower.assign(follower_loads.begin(), follower_loads.end());
  state_ = plant_.step(state_, last_.leader, last_.follower, dt, loads);
}

std::vector<JointState> EncoderDifferentiator::apply(std::span<const JointState> joints) {
  std::vector<JointState> out(joints.begin(), joints.end());
  if (previous_.size() != joints.size()) {
    previous_.resize(joints.size());
    for (std::size_t i = 0; i < joints.size(); ++i) {
      previous_[i] = joints[i].angle;
      out[i].velocity = 0.0;
    }
    return out;
  }
  for (std::size_t i = 0; i < joints.size(); ++i) {
    out[i].velocity = (joints[i].angle - previous_[i]) / dt_;
    previous_[i] = joints[i].angle;
  }
  return out;
}

}  // namespace biact
