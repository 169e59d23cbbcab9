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
#include <numbers>

#include "biact/bilateral_control.hpp"
#include "biact/sim_check.hpp"
#include "doctest.h"

using namespace biact;

TEST_CASE("dob: zero input keeps a zero estimate") {
  ObserverState o;
  for (int k = 0; k < 10; ++k) o = dob_update(o, 0.0, 0.0, 100.0, 0.1, 0.001);
  CHECK(o.tau_dis_hat == 0.0);
}

TEST_CASE("dob: one update by hand") {
  const ObserverState o = dob_update(ObserverState{}, 1.0, 0.0, 100.0, 0.1, 0.001);
  CHECK(o.z == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(o.tau_dis_hat == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("dob: held joint follows the exponential response") {
  const double g = 100.0, dt = 0.001, d = 0.5;
  ObserverState o;
  for (int k = 1; k <= 50; ++k) {
    o = dob_update(o, d, 0.0, g, 0.1, dt);
    // Discrete closed form of the forward-Euler low-pass.
    CHECK(std::abs(o.tau_dis_hat - d * (1.0 - std::pow(1.0 - g * dt, k))) < 1e-12);
  }
  // Continuous-time response d (1 - e^{-g t}) at t = 50 ms is 0.4966.
  CHECK(o.tau_dis_hat == doctest::Approx(0.5 * (1.0 - std::exp(-5.0))).epsilon(2e-3));
  CHECK(std::abs(o.tau_dis_hat - d) < 0.02 * d);
}

TEST_CASE("dob: non-finite input is rejected") {
  CHECK_THROWS_AS(dob_update(ObserverState{}, std::nan(""), 0.0, 100.0, 0.1, 0.001),
                  std::invalid_argument);
}

TEST_CASE("rfob: arithmetic") {
  ObserverState o;
  CHECK(rfob_update(o, std::numbers::pi / 2, 0.0, 0.5, 0.0, 0.3).tau_res ==
        doctest::Approx(0.0).epsilon(1e-12));
  o.tau_dis_hat = 1.0;
  CHECK(rfob_update(o, std::numbers::pi / 2, 0.4, 0.5, 0.0, 0.3).tau_res ==
        doctest::Approx(0.8).epsilon(1e-12));
  // sign(0) = 0: no Coulomb term at rest.
  CHECK(rfob_update(o, std::numbers::pi / 2, 0.0, 0.5, 0.2, 0.0).tau_res ==
        doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("bilateral step: symmetric equilibrium and formula arithmetic") {
  ControlGains gains = ControlGains::matching(ArmConfig::defaults(1));
  gains.j_nominal = {0.1, 0.1};
  std::vector<JointState> l(2), f(2);
  std::vector<ObserverState> ol(2), of(2);
  auto zero = bilateral_step(l, f, ol, of, gains, 0.001);
  CHECK(zero.leader[0] == 0.0);
  CHECK(zero.follower[0] == 0.0);

  l[0].angle = 0.1;
  std::vector<ObserverState> ol2(2), of2(2);
  auto t = bilateral_step(l, f, ol2, of2, gains, 0.001);
  CHECK(t.leader[0] == doctest::Approx(-2.0).epsilon(1e-12));
  CHECK(t.follower[0] == doctest::Approx(2.0).epsilon(1e-12));

  std::vector<JointState> short_(1);
  CHECK_THROWS_AS(bilateral_step(short_, f, ol, of, gains, 0.001), DimensionError);
}

TEST_CASE("autonomous step: degenerate tracking and perfect action-reaction") {
  ControlGains gains = ControlGains::matching(ArmConfig::defaults(1));
  std::vector<JointState> f(2);
  f[0] = {0.3, 0.1, 0.0};
  std::vector<ObserverState> of(2);
  of[0].tau_dis_hat = 0.25;
  LeaderCommand cmd{{0.3, 0.0}, {0.1, 0.0}, {0.0, 0.0}};
  auto tau = follower_autonomous_step(cmd, f, of, gains, 0.001);
  CHECK(tau[0] == doctest::Approx(0.25).epsilon(1e-12));

  std::vector<ObserverState> of2(2);
  of2[0].tau_res = 0.7;
  LeaderCommand pushback{{0.3, 0.0}, {0.1, 0.0}, {-0.7, 0.0}};
  auto tau2 = follower_autonomous_step(pushback, f, of2, gains, 0.001);
  CHECK(tau2[0] == doctest::Approx(0.0).epsilon(1e-12));

  LeaderCommand bad{{std::nan(""), 0.0}, {0.0, 0.0}, {0.0, 0.0}};
  CHECK_THROWS_AS(follower_autonomous_step(bad, f, of, gains, 0.001), std::invalid_argument);
}

TEST_CASE("encoder differentiator") {
  EncoderDifferentiator d(0.001);
  std::vector<JointState> j(1);
  j[0].angle = 1.0;
  CHECK(d.apply(j)[0].velocity == 0.0);
  j[0].angle = 1.002;
  CHECK(d.apply(j)[0].velocity == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("closed-loop invariants on the default plant") {
  const ScenarioSetup setup;
  for (const auto& r : run_invariant_suite(setup)) {
    INFO(r.name << " value=" << r.value << " bound=" << r.threshold << " " << r.detail);
    CHECK(r.passed);
  }
}
