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

#include "biact/sim_check.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace biact {

namespace {

constexpr double kTransient = 0.2;

Plant empty_scene_plant(const ScenarioSetup& setup) {
  ObjectSpec far;
  far.initial_position = {10.0, 10.0};
  return Plant(setup.arm, far, setup.scene);
}

BilateralLoop make_loop(const ScenarioSetup& setup) {
  BilateralLoop loop(empty_scene_plant(setup), setup.gains);
  loop.mutable_state().object_present = false;
  return loop;
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

TraceRow trace_row(const BilateralLoop& loop) {
  TraceRow r;
  r.t = loop.state().time;
  for (std::size_t i = 0; i < loop.state().leader.size(); ++i) {
    r.theta_l.push_back(loop.state().leader[i].angle);
    r.theta_f.push_back(loop.state().follower[i].angle);
    r.tau_res_l.push_back(loop.leader_observers()[i].tau_res);
    r.tau_res_f.push_back(loop.follower_observers()[i].tau_res);
    r.tau_dis_l.push_back(loop.leader_observers()[i].tau_dis_hat);
    r.tau_dis_f.push_back(loop.follower_observers()[i].tau_dis_hat);
  }
  return r;
}

}  // namespace

CheckResult check_position_tracking(const ScenarioSetup& setup, double duration,
                                    std::vector<TraceRow>* trace) {
  BilateralLoop loop = make_loop(setup);
  const OperatorModel op;
  const auto n = static_cast<std::size_t>(setup.arm.joints());
  const auto& home = setup.arm.home_angles;
  const double dt = setup.scene.dt;
  const auto steps = static_cast<long>(std::llround(duration / dt));
  std::vector<double> targets(n);
  double worst = 0.0;
  for (long k = 0; k < steps; ++k) {
    const double t = k * dt;
    for (std::size_t i = 0; i < n; ++i) {
      const double amp = (static_cast<int>(i) == setup.arm.gripper_index()) ? 0.2 : 0.3;
      targets[i] = home[i] + amp * std::sin(2.0 * std::numbers::pi * 0.5 * t + i) -
                   amp * std::sin(static_cast<double>(i));
    }
    loop.step(op.torque(targets, loop.state().leader, setup.gains));
    if (loop.state().time >= kTransient) {
      for (std::size_t i = 0; i < n; ++i) {
        worst = std::max(worst, std::abs(loop.state().leader[i].angle -
                                         loop.state().follower[i].angle));
      }
    }
    if (trace != nullptr && k % 10 == 0) trace->push_back(trace_row(loop));
  }
  CheckResult r{"position_tracking", worst < 0.01, worst, 0.01,
                "max |theta_l - theta_f| after 0.2 s [rad]"};
  return r;
}

CheckResult check_action_reaction(const ScenarioSetup& setup, double duration) {
  BilateralLoop loop = make_loop(setup);
  const OperatorModel op;
  const auto n = static_cast<std::size_t>(setup.arm.joints());
  const auto& home = setup.arm.home_angles;
  const double dt = setup.scene.dt;
  const double wall = home[0] + 0.1;
  const double wall_stiffness = 500.0;
  std::vector<double> targets(home.begin(), home.end());
  targets[0] = home[0] + 0.4;
  const auto steps = static_cast<long>(std::llround(duration / dt));
  const auto settle_from = static_cast<long>(std::llround((duration - 1.0) / dt));
  double peak = 0.0;
  double residual = 0.0;
  std::vector<double> loads(n, 0.0);
  for (long k = 0; k < steps; ++k) {
    loads[0] = wall_stiffness * std::max(0.0, loop.state().follower[0].angle - wall);
    peak = std::max(peak, loads[0]);
    loop.step(op.torque(targets, loop.state().leader, setup.gains), loads);
    if (k >= settle_from) {
      residual = std::max(residual, std::abs(loop.leader_observers()[0].tau_res +
                                             loop.follower_observers()[0].tau_res));
    }
  }
  const double ratio = peak > 0.0 ? residual / peak : 1.0;
  return CheckResult{"action_reaction", peak > 0.0 && ratio < 0.05, ratio, 0.05,
                     "steady |tau_res_l + tau_res_f| / peak contact torque (peak " + fmt(peak) +
                         " N m)"};
}

CheckResult check_dob_convergence(const ControlGains& gains, double disturbance, double dt) {
  const double g = gains.g_dob;
  const double jn = gains.j_nominal.empty() ? 0.1 : gains.j_nominal.front();
  const auto steps = static_cast<int>(std::llround(5.0 / g / dt));
  ObserverState obs;
  double worst_closed_form = 0.0;
  for (int k = 1; k <= steps; ++k) {
    obs = dob_update(obs, disturbance, 0.0, g, jn, dt);
    const double expected = disturbance * (1.0 - std::pow(1.0 - g * dt, k));
    worst_closed_form = std::max(worst_closed_form, std::abs(obs.tau_dis_hat - expected));
  }
  const double rel = std::abs(obs.tau_dis_hat - disturbance) / std::abs(disturbance);
  const bool ok = rel < 0.02 && worst_closed_form < 1e-9;
  return CheckResult{"dob_convergence", ok, rel, 0.02,
                     "relative error after 5/g_dob s; closed-form deviation " +
                         fmt(worst_closed_form)};
}

CheckResult check_rfob_exactness(const ScenarioSetup& setup, double external, double duration) {
  Plant plant = empty_scene_plant(setup);
  SceneState state = plant.initial_state();
  state.object_present = false;
  const auto n = static_cast<std::size_t>(setup.arm.joints());
  std::vector<ObserverState> obs(n);
  LeaderCommand hold;
  for (std::size_t i = 0; i < n; ++i) {
    hold.angle.push_back(setup.arm.home_angles[i]);
    hold.velocity.push_back(0.0);
    hold.torque.push_back(0.0);
  }
  std::vector<double> loads(n, 0.0);
  loads[0] = external;
  const double dt = setup.scene.dt;
  const auto steps = static_cast<long>(std::llround(duration / dt));
  for (long k = 0; k < steps; ++k) {
    const auto tau = follower_autonomous_step(hold, state.follower, obs, setup.gains, dt);
    state = plant.step_follower(state, tau, dt, loads);
  }
  const double rel = std::abs(obs[0].tau_res - external) / std::abs(external);
  return CheckResult{"rfob_exactness", rel < 0.05, rel, 0.05,
                     "relative error of tau_res vs injected " + fmt(external) + " N m"};
}

CheckResult check_dob_identity(const ScenarioSetup& setup, unsigned seed) {
  BilateralLoop loop = make_loop(setup);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> push(-1.0, 1.0);
  const auto n = static_cast<std::size_t>(setup.arm.joints());
  std::vector<double> h(n);
  bool ok = true;
  double worst = 0.0;
  for (int k = 0; k < 2000; ++k) {
    for (auto& v : h) v = push(rng);
    // Observers were last updated with the state before this step.
    const SceneState before = loop.state();
    loop.step(h);
    for (std::size_t i = 0; i < n; ++i) {
      for (auto [obs, joint] : {std::pair{loop.leader_observers()[i], before.leader[i]},
                                std::pair{loop.follower_observers()[i], before.follower[i]}}) {
        const double expect = obs.z - setup.gains.g_dob * setup.gains.j_nominal[i] * joint.velocity;
        worst = std::max(worst, std::abs(obs.tau_dis_hat - expect));
        ok = ok && obs.tau_dis_hat == expect;
      }
    }
  }
  return CheckResult{"dob_identity", ok, worst, 0.0,
                     "max |tau_dis_hat - (z - g J_n omega)| over a random session"};
}

CheckResult check_symmetry(const ScenarioSetup& setup, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto n = static_cast<std::size_t>(setup.arm.joints());
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<JointState> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = {u(rng), u(rng), 0.0};
      b[i] = {u(rng), u(rng), 0.0};
    }
    std::vector<ObserverState> o1(n), o2(n), o3(n), o4(n);
    const auto fwd = bilateral_step(a, b, o1, o2, setup.gains, setup.scene.dt);
    const auto rev = bilateral_step(b, a, o3, o4, setup.gains, setup.scene.dt);
    for (std::size_t i = 0; i < n; ++i) {
      worst = std::max(worst, std::abs(fwd.leader[i] + rev.leader[i]));
      worst = std::max(worst, std::abs(fwd.follower[i] + rev.follower[i]));
    }
  }
  return CheckResult{"symmetry", worst == 0.0, worst, 0.0,
                     "max |tau(l,f) + tau(f,l)| with zero observer state"};
}

CheckResult check_energy_sanity(const ScenarioSetup& setup, unsigned seed) {
  ArmConfig arm = setup.arm;
  std::fill(arm.gravity_torque_scale.begin(), arm.gravity_torque_scale.end(), 0.0);
  ObjectSpec far;
  far.initial_position = {10.0, 10.0};
  Plant plant(arm, far, setup.scene);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> v(-4.0, 4.0);
  const std::vector<double> zero(static_cast<std::size_t>(arm.joints()), 0.0);
  double worst_gain = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    SceneState s = plant.initial_state();
    for (auto& j : s.leader) j.velocity = v(rng);
    for (auto& j : s.follower) j.velocity = v(rng);
    double prev = plant.kinetic_energy(s.leader) + plant.kinetic_energy(s.follower);
    for (int k = 0; k < 2000; ++k) {
      s = plant.step(s, zero, zero, setup.scene.dt);
      const double e = plant.kinetic_energy(s.leader) + plant.kinetic_energy(s.follower);
      worst_gain = std::max(worst_gain, e - prev);
      prev = e;
    }
  }
  return CheckResult{"energy_sanity", worst_gain <= 0.0, worst_gain, 0.0,
                     "largest step-to-step kinetic energy increase [J]"};
}

CheckResult check_determinism(const ScenarioSetup& setup) {
  auto run = [&] {
    std::vector<TraceRow> rows;
    check_position_tracking(setup, 1.0, &rows);
    return rows;
  };
  const auto a = run();
  const auto b = run();
  bool same = a.size() == b.size();
  for (std::size_t k = 0; same && k < a.size(); ++k) {
    const auto eq = [](const std::vector<double>& x, const std::vector<double>& y) {
      return x.size() == y.size() &&
             std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0;
    };
    same = eq(a[k].theta_l, b[k].theta_l) && eq(a[k].theta_f, b[k].theta_f) &&
           eq(a[k].tau_res_l, b[k].tau_res_l) && eq(a[k].tau_res_f, b[k].tau_res_f);
  }
  return CheckResult{"determinism", same, same ? 0.0 : 1.0, 0.0,
                     "bitwise difference between two identical sessions"};
}

std::vector<CheckResult> run_invariant_suite(const ScenarioSetup& setup) {
  return {check_dob_identity(setup),       check_dob_convergence(setup.gains),
          check_rfob_exactness(setup),     check_position_tracking(setup),
          check_action_reaction(setup),    check_symmetry(setup),
          check_energy_sanity(setup),      check_determinism(setup)};
}

void print_results(std::ostream& os, const std::vector<CheckResult>& results) {
  os << std::left << std::setw(20) << "invariant" << std::setw(7) << "result" << std::setw(14)
     << "value" << std::setw(12) << "bound" << "detail\n";
  for (const auto& r : results) {
    os << std::left << std::setw(20) << r.name << std::setw(7) << (r.passed ? "PASS" : "FAIL")
       << std::setw(14) << fmt(r.value) << std::setw(12) << fmt(r.threshold) << r.detail << '\n';
  }
}

void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& rows) {
  if (rows.empty()) return;
  const auto n = rows.front().theta_l.size();
  os << "t";
  for (const char* col : {"theta_l", "theta_f", "tau_res_l", "tau_res_f", "tau_dis_l", "tau_dis_f"}) {
    for (std::size_t i = 0; i < n; ++i) os << ',' << col << i;
  }
  os << '\n';
  os << std::setprecision(9);
  for (const auto& r : rows) {
    os << r.t;
    for (const auto* v : {&r.theta_l, &r.theta_f, &r.tau_res_l, &r.tau_res_f, &r.tau_dis_l,
                          &r.tau_dis_f}) {
      for (double x : *v) os << ',' << x;
    }
    os << '\n';
  }
}

}  // namespace biact
