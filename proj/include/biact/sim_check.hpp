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

// Closed-loop scenarios that exercise the controller invariants on the live
// plant. Shared by the `sim-check` subcommand and the acceptance suite.

#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "biact/arm_dynamics.hpp"
#include "biact/bilateral_control.hpp"

namespace biact {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;      // measured quantity
  double threshold = 0.0;  // pass bound for `value`
  std::string detail;
};

struct TraceRow {
  double t = 0.0;
  std::vector<double> theta_l, theta_f, tau_res_l, tau_res_f, tau_dis_l, tau_dis_f;
};

struct ScenarioSetup {
  ArmConfig arm = ArmConfig::defaults(2);
  ControlGains gains = ControlGains::matching(ArmConfig::defaults(2));
  SceneConfig scene;
};

/// Free-space session: a scripted operator drags the leader along smooth
/// sinusoids for `duration` seconds. Value = worst |theta_l - theta_f| after
/// the 0.2 s transient, over all joints.
CheckResult check_position_tracking(const ScenarioSetup& setup, double duration = 5.0,
                                    std::vector<TraceRow>* trace = nullptr);

/// Follower joint 0 pushed into a stiff virtual wall through the leader.
/// Value = steady-state |tau_res_l + tau_res_f| / peak contact torque.
CheckResult check_action_reaction(const ScenarioSetup& setup, double duration = 5.0);

/// Constant disturbance on a held joint. Value = relative estimation error
/// after 5 / g_dob seconds; also fails if any step departs from the discrete
/// closed form by more than 1e-9.
CheckResult check_dob_convergence(const ControlGains& gains, double disturbance = 0.5,
                                  double dt = 0.001);

/// Autonomous follower holding a pose against an injected external torque.
/// Value = relative error of tau_res against the injected torque.
CheckResult check_rfob_exactness(const ScenarioSetup& setup, double external = 0.3,
                                 double duration = 2.0);

/// tau_dis_hat == z - g_dob * J_n * omega after every update of a random session.
CheckResult check_dob_identity(const ScenarioSetup& setup, unsigned seed = 1);

/// Swapping leader and follower inputs negates the position-error torques.
CheckResult check_symmetry(const ScenarioSetup& setup, unsigned seed = 2);

/// Unforced, gravity-free plant with friction never gains kinetic energy.
CheckResult check_energy_sanity(const ScenarioSetup& setup, unsigned seed = 3);

/// Two identical bilateral sessions produce bit-identical state streams.
CheckResult check_determinism(const ScenarioSetup& setup);

std::vector<CheckResult> run_invariant_suite(const ScenarioSetup& setup);

void print_results(std::ostream& os, const std::vector<CheckResult>& results);
void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& rows);

}  // namespace biact
