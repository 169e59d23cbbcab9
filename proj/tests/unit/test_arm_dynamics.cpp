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
#include <cstring>
#include <numbers>
#include <random>

#include "biact/arm_dynamics.hpp"
#include "doctest.h"

using namespace biact;

namespace {

ArmConfig frictionless_single_joint(double inertia, double viscous) {
  ArmConfig c = ArmConfig::defaults(1);
  c.inertia = {inertia, 0.02};
  c.viscous_friction = {viscous, 0.0};
  c.coulomb_friction = {0.0, 0.0};
  c.gravity_torque_scale = {0.0, 0.0};
  c.home_angles = {0.0, 0.0};
  c.joint_limits = {100.0, 0.8};
  return c;
}

ObjectSpec far_object() {
  ObjectSpec o;
  o.initial_position = {5.0, 5.0};
  return o;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

bool bit_identical(const SceneState& a, const SceneState& b) {
  if (!same_bits(a.time, b.time) || a.leader.size() != b.leader.size()) return false;
  for (std::size_t i = 0; i < a.leader.size(); ++i) {
    for (auto [x, y] : {std::pair{a.leader[i], b.leader[i]}, std::pair{a.follower[i], b.follower[i]}}) {
      if (!same_bits(x.angle, y.angle) || !same_bits(x.velocity, y.velocity) ||
          !same_bits(x.torque, y.torque)) {
        return false;
      }
    }
  }
  return same_bits(a.object_position.x, b.object_position.x) &&
         same_bits(a.object_position.y, b.object_position.y) && a.object_held == b.object_held &&
         a.object_crushed == b.object_crushed;
}

}  // namespace

TEST_CASE("zero torque at equilibrium only advances time") {
  ArmConfig c = ArmConfig::defaults(2);
  std::fill(c.gravity_torque_scale.begin(), c.gravity_torque_scale.end(), 0.0);
  Plant plant(c, far_object(), SceneConfig{});
  const SceneState s0 = plant.initial_state();
  const std::vector<double> zero(3, 0.0);
  const SceneState s1 = plant.step(s0, zero, zero, 0.001);
  CHECK(s1.time == doctest::Approx(0.001));
  CHECK(s1.steps == 1);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(s1.leader[i].angle == s0.leader[i].angle);
    CHECK(s1.follower[i].angle == s0.follower[i].angle);
    CHECK(s1.follower[i].velocity == 0.0);
  }
}

TEST_CASE("one semi-implicit Euler step from rest") {
  Plant plant(frictionless_single_joint(0.1, 0.0), far_object(), SceneConfig{});
  const SceneState s0 = plant.initial_state();
  const std::vector<double> tau{1.0, 0.0};
  const SceneState s1 = plant.step(s0, tau, tau, 0.001);
  CHECK(s1.follower[0].velocity == doctest::Approx(0.01).epsilon(1e-12));
  CHECK(s1.follower[0].angle == doctest::Approx(1e-5).epsilon(1e-12));
  CHECK(s1.follower[0].torque == 1.0);
}

TEST_CASE("first-order velocity response approaches the closed form") {
  const double inertia = 0.1, viscous = 1.0, tau = 1.0, dt = 0.001;
  Plant plant(frictionless_single_joint(inertia, viscous), far_object(), SceneConfig{});
  SceneState s = plant.initial_state();
  const std::vector<double> torques{tau, 0.0};
  for (int k = 1; k <= 5000; ++k) {
    s = plant.step(s, torques, torques, dt);
    const double t = k * dt;
    if (k % 250 == 0) {
      const double exact = tau / viscous * (1.0 - std::exp(-viscous * t / inertia));
      CHECK(std::abs(s.follower[0].velocity - exact) <= 0.01 * std::abs(exact));
    }
  }
  CHECK(std::abs(s.follower[0].velocity - 1.0) < 0.01);
}

TEST_CASE("gripper contact follows Hooke's law") {
  SceneConfig scene;
  ObjectSpec obj;
  obj.contact_stiffness = 500.0;
  obj.radius = 0.02;
  // Aperture 2 mm narrower than the 40 mm object.
  const double angle = (scene.gripper_open_aperture - 0.038) / scene.gripper_aperture_per_rad;
  CHECK(gripper_contact(angle, obj, {0.3, 0.0}, {0.3, 0.0}, scene) ==
        doctest::Approx(1.0).epsilon(1e-9));
  CHECK(gripper_contact(0.0, obj, {0.3, 0.0}, {0.3, 0.0}, scene) == 0.0);
  // Outside the capture radius the fingers close on air.
  CHECK(gripper_contact(angle, obj, {0.3, 0.0}, {0.4, 0.0}, scene) == 0.0);
}

TEST_CASE("hold threshold is mu * m * g") {
  ObjectSpec softball;
  softball.mass = 0.03;
  CHECK(hold_force_threshold(softball, SceneConfig{}) == doctest::Approx(0.8829).epsilon(1e-9));
}

TEST_CASE("forward kinematics of a planar two-link chain") {
  ArmConfig c = ArmConfig::defaults(2);
  c.link_lengths = {0.1, 0.1};
  const double pi = std::numbers::pi;
  auto at = [&](double a, double b) {
    const std::vector<double> q{a, b};
    return forward_kinematics(q, c);
  };
  CHECK(at(0, 0).x == doctest::Approx(0.2));
  CHECK(at(0, 0).y == doctest::Approx(0.0));
  CHECK(at(pi / 2, 0).x == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(at(pi / 2, 0).y == doctest::Approx(0.2));
  CHECK(at(pi / 2, -pi / 2).x == doctest::Approx(0.1));
  CHECK(at(pi / 2, -pi / 2).y == doctest::Approx(0.1));
  const std::vector<double> wrong{0.0};
  CHECK_THROWS_AS(forward_kinematics(wrong, c), DimensionError);
}

TEST_CASE("inverse kinematics inverts forward kinematics") {
  ArmConfig c = ArmConfig::defaults(2);
  c.link_lengths = {0.1, 0.1};
  auto a = inverse_kinematics_2link(0.2, 0.0, c);
  REQUIRE(a);
  CHECK(a->first == doctest::Approx(0.0));
  CHECK(a->second == doctest::Approx(0.0));
  auto b = inverse_kinematics_2link(0.0, 0.2, c);
  REQUIRE(b);
  CHECK(b->first == doctest::Approx(std::numbers::pi / 2));
  CHECK(b->second == doctest::Approx(0.0).epsilon(1e-6));
  CHECK_FALSE(inverse_kinematics_2link(0.3, 0.0, c));

  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> r(0.02, 0.195), phi(-3.0, 3.0);
  for (int i = 0; i < 200; ++i) {
    const double rad = r(rng), ang = phi(rng);
    const double x = rad * std::cos(ang), y = rad * std::sin(ang);
    auto q = inverse_kinematics_2link(x, y, c);
    REQUIRE(q);
    const std::vector<double> qv{q->first, q->second};
    const Vec2 p = forward_kinematics(qv, c);
    CHECK(p.x == doctest::Approx(x).epsilon(1e-9));
    CHECK(p.y == doctest::Approx(y).epsilon(1e-9));
  }
}

TEST_CASE("step rejects bad inputs") {
  Plant plant(ArmConfig::defaults(2), ObjectSpec{}, SceneConfig{});
  const SceneState s = plant.initial_state();
  const std::vector<double> ok(3, 0.0), short_(2, 0.0);
  std::vector<double> nan(3, 0.0);
  nan[1] = std::nan("");
  CHECK_THROWS_AS(plant.step(s, short_, ok, 0.001), DimensionError);
  CHECK_THROWS_AS(plant.step(s, ok, nan, 0.001), std::invalid_argument);
  CHECK_THROWS_AS(plant.step(s, ok, ok, 0.0), std::invalid_argument);
}

TEST_CASE("config validation") {
  ArmConfig c = ArmConfig::defaults(2);
  c.inertia[0] = 0.0;
  CHECK_THROWS(c.validate());
  ObjectSpec o;
  o.mass = -1.0;
  CHECK_THROWS(o.validate());
  CHECK_NOTHROW(ArmConfig::defaults(4).validate());
}

TEST_CASE("property: determinism, energy, joint limits under random torques") {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> torque(-8.0, 8.0);
  ArmConfig c = ArmConfig::defaults(2);
  Plant plant(c, ObjectSpec{}, SceneConfig{});

  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::vector<double>> seq;
    for (int k = 0; k < 2000; ++k) {
      std::vector<double> t(6);
      for (auto& v : t) v = torque(rng);
      seq.push_back(t);
    }
    auto run = [&] {
      std::vector<SceneState> out;
      SceneState s = plant.initial_state();
      for (const auto& t : seq) {
        s = plant.step(s, std::span(t).first(3), std::span(t).last(3), 0.001);
        out.push_back(s);
      }
      return out;
    };
    const auto a = run();
    const auto b = run();
    for (std::size_t k = 0; k < a.size(); ++k) {
      REQUIRE(bit_identical(a[k], b[k]));
      for (std::size_t j = 0; j < 3; ++j) {
        REQUIRE(std::abs(a[k].leader[j].angle) <= c.joint_limits[j]);
        REQUIRE(std::abs(a[k].follower[j].angle) <= c.joint_limits[j]);
      }
    }
  }

  // Free decay: no torque, no gravity, positive friction.
  ArmConfig free = c;
  std::fill(free.gravity_torque_scale.begin(), free.gravity_torque_scale.end(), 0.0);
  Plant decay(free, ObjectSpec{}, SceneConfig{});
  std::uniform_real_distribution<double> vel(-5.0, 5.0);
  for (int trial = 0; trial < 20; ++trial) {
    SceneState s = decay.initial_state();
    for (auto& j : s.follower) j.velocity = vel(rng);
    for (auto& j : s.leader) j.velocity = vel(rng);
    const std::vector<double> zero(3, 0.0);
    double e_prev = decay.kinetic_energy(s.follower) + decay.kinetic_energy(s.leader);
    for (int k = 0; k < 3000; ++k) {
      s = decay.step(s, zero, zero, 0.001);
      const double e = decay.kinetic_energy(s.follower) + decay.kinetic_energy(s.leader);
      REQUIRE(e <= e_prev);
      e_prev = e;
    }
  }
}

TEST_CASE("grasp: held object tracks the end effector, crush releases it") {
  ArmConfig c = ArmConfig::defaults(2);
  SceneConfig scene;
  ObjectSpec obj;
  obj.mass = 0.03;
  obj.contact_stiffness = 150.0;
  obj.radius = 0.033;
  obj.crush_force = 8.0;
  Plant plant(c, obj, scene);
  SceneState s = plant.initial_state();
  // Place the object between the fingers at the current end effector.
  s.object_position = forward_kinematics(s.follower, c);
  const double contact_angle = (scene.gripper_open_aperture - 2 * obj.radius) /
                               scene.gripper_aperture_per_rad;
  const double needed_pen = hold_force_threshold(obj, scene) * 1.5 / obj.contact_stiffness;
  s.follower[2].angle = contact_angle + needed_pen / scene.gripper_aperture_per_rad;
  const std::vector<double> zero(3, 0.0);
  s = plant.step(s, zero, zero, 0.001);
  CHECK(s.object_held);
  CHECK(s.contact_force >= hold_force_threshold(obj, scene));

  // Swing joint 0; the object follows the end effector while held.
  std::vector<double> swing{0.0, 0.0, 0.0}, hold{0.0, 0.0, 0.0};
  swing[0] = 2.0;
  hold[2] = s.contact_force * scene.gripper_aperture_per_rad + c.coulomb_friction[2];
  for (int k = 0; k < 50; ++k) {
    s = plant.step(s, zero, std::vector<double>{2.0, 0.0, hold[2]}, 0.001);
    if (s.object_held) {
      const Vec2 ee = forward_kinematics(s.follower, c);
      CHECK(distance(ee, s.object_position) < 1e-12);
      CHECK(s.contact_force >= hold_force_threshold(obj, scene));
    }
  }

  // Squeeze hard enough to crush.
  SceneState crush = s;
  crush.follower[2].angle = contact_angle + 0.1 / scene.gripper_aperture_per_rad;
  crush = plant.step(crush, zero, zero, 0.001);
  CHECK(crush.object_crushed);
  CHECK_FALSE(crush.object_held);
}
