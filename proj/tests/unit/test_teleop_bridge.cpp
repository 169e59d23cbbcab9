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

#include <boost/asio.hpp>
#include <boost/beast.hpp>
#include <boost/beast/websocket.hpp>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <thread>

#include "../support/temp_dir.hpp"
#include "biact/episode_store.hpp"
#include "biact/teleop_bridge.hpp"
#include "doctest.h"

using namespace biact;
using biact::testing::TempDir;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

SceneSetup teleop_setup() {
  SceneSetup s;
  s.object = parse_object_spec("softball");
  s.object.initial_position = s.task.pick_position;
  return s;
}

std::string type_of(const std::string& frame) { return json::parse(frame).at("type"); }

std::string target_msg(double x, double y, double grip) {
  return json{{"type", "target"}, {"x", x}, {"y", y}, {"grip", grip}}.dump();
}

/// Every frame the session emits while replaying `transcript` ("step<TAB>text"
/// lines) for `steps` control periods, as "step<TAB>frame" lines with "t" removed.
std::string replay(TeleopSession& session, const std::string& transcript, std::int64_t steps) {
  std::multimap<std::int64_t, std::string> inbox;
  std::istringstream in(transcript);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    inbox.emplace(std::stoll(line.substr(0, tab)), line.substr(tab + 1));
  }
  std::ostringstream out;
  auto emit = [&](std::int64_t step, const std::string& frame) {
    auto j = nlohmann::ordered_json::parse(frame);
    j.erase("t");
    out << step << '\t' << j.dump() << '\n';
  };
  emit(0, TeleopSession::hello_frame());
  for (std::int64_t step = 0; step < steps; ++step) {
    const auto [lo, hi] = inbox.equal_range(step);
    for (auto it = lo; it != hi; ++it) {
      for (const auto& r : session.handle(it->second)) emit(step, r);
    }
    if (step == 0) {
      if (auto f = session.poll_state()) emit(step, *f);
    }
    session.step();
    if (auto f = session.poll_state()) emit(step + 1, *f);
  }
  return out.str();
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string license_comment() {
  const std::string text = read_text(fs::path(BIACT_SOURCE_DIR) / "tests" / "golden" /
                                     "teleop_transcript.tsv");
  std::istringstream in(text);
  std::string out, line;
  while (std::getline(in, line) && !line.empty() && line[0] == '#') out += line + '\n';
  return out;
}

std::string without_comments(const std::string& text) {
  std::istringstream in(text);
  std::string out, line;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] == '#') continue;
    out += line + '\n';
  }
  return out;
}

}  // namespace

TEST_CASE("queues: drop-oldest keeps the newest items, targets collapse to the latest") {
  DropOldestQueue<int> q(4);
  std::size_t dropped = 0;
  for (int i = 0; i < 10; ++i) dropped += q.push(i);
  CHECK(dropped == 6);
  CHECK(q.size() == 4);
  for (int want = 6; want < 10; ++want) CHECK(*q.try_pop() == want);
  CHECK_FALSE(q.try_pop().has_value());

  InboundMailbox box(3);
  CHECK(box.push({1, "t1", true}));
  CHECK(box.push({1, "t2", true}));
  CHECK(box.push({1, "rec", false}));
  CHECK(box.push({1, "t3", true}));
  CHECK(box.push({1, "t4", true}));
  CHECK_FALSE(box.push({1, "reset", false}));  // full; a further target would still collapse
  CHECK(box.push({1, "t5", true}));
  const auto items = box.drain();
  REQUIRE(items.size() == 3);
  CHECK(items[0].text == "t2");
  CHECK(items[1].text == "rec");
  CHECK(items[2].text == "t5");
  CHECK(box.drain().empty());
  CHECK(is_target_message(target_msg(0.2, 0.0, 0.0)));
  CHECK_FALSE(is_target_message(R"({"type":"reset"})"));
  CHECK_FALSE(is_target_message("not json"));
}

TEST_CASE("hello frame announces protocol version 1") {
  CHECK(TeleopSession::hello_frame() == R"({"type":"hello","version":1})");
}

TEST_CASE("target at the current end effector leaves the leader torques near zero") {
  const SceneSetup setup = teleop_setup();
  TeleopSession s(setup, {});
  const Vec2 ee = forward_kinematics(s.scene().leader, setup.arm);
  CHECK(s.handle(target_msg(ee.x, ee.y, 0.0)).empty());
  for (int i = 0; i < 1000; ++i) s.step();
  const auto h = TeleopOptions{}.op.torque(s.leader_targets(), s.scene().leader, setup.gains);
  for (std::size_t i = 0; i < h.size(); ++i) {
    CHECK(std::abs(h[i]) < 1e-3);
    CHECK(std::abs(s.loop().leader_observers()[i].tau_res) < 1e-3);
  }
}

TEST_CASE("drag target drives the follower to the inverse-kinematics pose") {
  const SceneSetup setup = teleop_setup();
  TeleopSession s(setup, {});
  REQUIRE(s.handle(target_msg(0.22, 0.05, 0.5)).empty());
  const auto ik = inverse_kinematics_2link(0.22, 0.05, setup.arm);
  REQUIRE(ik);
  CHECK(s.leader_targets()[0] == doctest::Approx(ik->first));
  CHECK(s.leader_targets()[1] == doctest::Approx(ik->second));
  CHECK(s.leader_targets()[2] == doctest::Approx(0.5 * setup.arm.joint_limits[2]));
  for (int i = 0; i < 2000; ++i) s.step();
  const Vec2 ee = forward_kinematics(s.scene().follower, setup.arm);
  CHECK(ee.x == doctest::Approx(0.22).epsilon(0.01));
  CHECK(ee.y == doctest::Approx(0.05).epsilon(0.01));
}

TEST_CASE("malformed and unknown messages get error frames and the session keeps going") {
  TeleopSession s(teleop_setup(), {});
  auto only_error = [](const std::vector<std::string>& r) {
    return r.size() == 1 && type_of(r[0]) == "error";
  };
  const auto bogus = s.handle(R"({"type":"bogus"})");
  REQUIRE(only_error(bogus));
  CHECK(json::parse(bogus[0]).at("msg") == "unknown message type 'bogus'");
  CHECK(only_error(s.handle("{not json")));
  CHECK(only_error(s.handle("[1,2,3]")));
  CHECK(only_error(s.handle(R"({"kind":"target"})")));
  CHECK(only_error(s.handle(R"({"type":"target","x":0.2,"y":0})")));
  CHECK(only_error(s.handle(R"({"type":"target","x":"0.2","y":0,"grip":0})")));
  CHECK(only_error(s.handle(target_msg(0.2, 0.0, -0.1))));
  CHECK(only_error(s.handle(target_msg(0.5, 0.0, 0.0))));   // beyond reach
  CHECK(only_error(s.handle(target_msg(0.01, 0.0, 0.0))));  // inside the inner hole
  CHECK(only_error(s.handle(R"({"type":"record","action":"stop"})")));
  CHECK(only_error(s.handle(R"({"type":"record","action":"start"})")));  // no out_dir
  // The next valid message is still processed.
  CHECK(s.handle(target_msg(0.2, 0.02, 0.0)).empty());
  const auto ik = inverse_kinematics_2link(0.2, 0.02, teleop_setup().arm);
  CHECK(s.leader_targets()[0] == doctest::Approx(ik->first));
}

TEST_CASE("state frames stream at 30 Hz with the documented fields") {
  TeleopSession s(teleop_setup(), {});
  REQUIRE(s.poll_state());
  int frames = 0;
  for (int i = 0; i < 1000; ++i) {
    s.step();
    if (s.poll_state()) ++frames;
  }
  CHECK(frames == 30);
  const auto j = nlohmann::ordered_json::parse(s.state_frame());
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  CHECK(keys == std::vector<std::string>{"type", "t", "leader", "follower", "tau_res_l",
                                         "tau_res_f", "object", "held", "recording"});
  CHECK(j.at("leader").size() == 3);
  CHECK(j.at("object").size() == 2);
  CHECK(j.at("t").get<double>() == doctest::Approx(1.0));
}

TEST_CASE("record start, two seconds of drag, stop: one valid episode passing the gate") {
  TempDir dir("teleop");
  TeleopOptions opts;
  opts.out_dir = dir.path;
  TeleopSession s(teleop_setup(), opts);
  for (int i = 0; i < 300; ++i) s.step();
  REQUIRE(s.handle(R"({"type":"record","action":"start"})").empty());
  CHECK(s.recording());
  for (int i = 0; i < 2000; ++i) {
    if (i % 10 == 0) {
      const double u = i / 2000.0;
      const double m = u * u * u * (10 - 15 * u + 6 * u * u);
      REQUIRE(s.handle(target_msg(0.18 + 0.05 * m, -0.04 * m, 0.2 * m)).empty());
    }
    s.step();
  }
  const auto reply = s.handle(R"({"type":"record","action":"stop"})");
  REQUIRE(reply.size() == 1);
  const auto j = json::parse(reply[0]);
  REQUIRE(j.at("type") == "saved");
  CHECK(j.at("episode") == "teleop_0000");
  CHECK(j.at("ticks") == 200);
  CHECK_FALSE(s.recording());
  CHECK(s.episodes_saved() == 1);
  const Episode ep = load_episode(dir.path / "teleop_0000");
  CHECK_NOTHROW(ep.validate());
  CHECK(ep.ticks() == 200);
  CHECK(ep.meta.source == "teleop");

  // Discard leaves nothing behind.
  REQUIRE(s.handle(R"({"type":"record","action":"start"})").empty());
  for (int i = 0; i < 100; ++i) s.step();
  REQUIRE(s.handle(R"({"type":"record","action":"discard"})").empty());
  CHECK(std::distance(fs::directory_iterator(dir.path), fs::directory_iterator()) == 1);
}

TEST_CASE("a jerky drag is rejected by the quality gate") {
  TempDir dir("teleop_gate");
  TeleopOptions opts;
  opts.out_dir = dir.path;
  TeleopSession s(teleop_setup(), opts);
  for (int i = 0; i < 300; ++i) s.step();
  REQUIRE(s.handle(R"({"type":"record","action":"start"})").empty());
  for (int i = 0; i < 1000; ++i) {
    if (i % 200 == 0) REQUIRE(s.handle(target_msg(i % 400 ? 0.12 : 0.3, 0.0, 0.0)).empty());
    s.step();
  }
  const auto reply = s.handle(R"({"type":"record","action":"stop"})");
  REQUIRE(reply.size() == 1);
  CHECK(type_of(reply[0]) == "error");
  CHECK(json::parse(reply[0]).at("msg").get<std::string>().find("quality gate") !=
        std::string::npos);
  CHECK(fs::is_empty(dir.path));
}

TEST_CASE("protocol transcript replays to the golden responses modulo t") {
  const fs::path golden = fs::path(BIACT_SOURCE_DIR) / "tests" / "golden";
  const std::string transcript = read_text(golden / "teleop_transcript.tsv");
  REQUIRE_FALSE(transcript.empty());
  TempDir dir("teleop_golden");
  TeleopOptions opts;
  opts.out_dir = dir.path;
  TeleopSession a(teleop_setup(), opts);
  const std::string got = replay(a, transcript, 3000);
  if (std::getenv("BIACT_UPDATE_GOLDEN")) {
    std::ofstream(golden / "teleop_responses.tsv") << license_comment() << got;
  }
  const std::string want = without_comments(read_text(golden / "teleop_responses.tsv"));
  CHECK(got == want);
  // Lockstep replay is deterministic run to run.
  TempDir dir2("teleop_golden2");
  opts.out_dir = dir2.path;
  TeleopSession b(teleop_setup(), opts);
  CHECK(replay(b, transcript, 3000) == got);
}

// ---------------------------------------------------------------------------
// Live server

namespace {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = net::ip::tcp;

class Client {
 public:
  explicit Client(int port) : ws_(ioc_) {
    tcp::resolver resolver(ioc_);
    net::connect(ws_.next_layer(), resolver.resolve("127.0.0.1", std::to_string(port)));
    ws_.handshake("127.0.0.1", "/");
    ws_.text(true);
  }
  void send(const std::string& text) { ws_.write(net::buffer(text)); }
  std::string read() {
    beast::flat_buffer buf;
    ws_.read(buf);
    return beast::buffers_to_string(buf.data());
  }
  /// Reads until a frame of `type` arrives (skipping state frames).
  std::string read_until(const std::string& type) {
    for (int i = 0; i < 1000; ++i) {
      std::string f = read();
      if (type_of(f) == type) return f;
    }
    return {};
  }
  void close() { ws_.close(websocket::close_code::normal); }

 private:
  net::io_context ioc_;
  websocket::stream<tcp::socket> ws_;
};

}  // namespace

TEST_CASE("live server: hello, errors, state stream and a recorded episode") {
  TempDir dir("teleop_live");
  TeleopOptions opts;
  opts.out_dir = dir.path;
  ServerOptions so;
  so.port = 0;
  TeleopServer server(teleop_setup(), opts, so);
  const int port = server.start();
  REQUIRE(port > 0);

  Client c(port);
  CHECK(c.read() == R"({"type":"hello","version":1})");
  const auto state = json::parse(c.read_until("state"));
  CHECK(state.at("leader").size() == 3);

  c.send(R"({"type":"bogus"})");
  CHECK(json::parse(c.read_until("error")).at("msg") == "unknown message type 'bogus'");

  // A second client observes but cannot steer.
  Client observer(port);
  CHECK(observer.read() == R"({"type":"hello","version":1})");
  observer.send(R"({"type":"reset"})");
  CHECK(json::parse(observer.read_until("error")).at("msg").get<std::string>().find("read-only") !=
        std::string::npos);
  observer.close();

  c.send(R"({"type":"record","action":"start"})");
  const auto t0 = std::chrono::steady_clock::now();
  for (;;) {
    const double u = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 2.0;
    if (u >= 1.0) break;
    const double m = u * u * u * (10 - 15 * u + 6 * u * u);
    c.send(target_msg(0.18 + 0.04 * m, -0.03 * m, 0.1 * m));
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  c.send(R"({"type":"record","action":"stop"})");
  const auto saved = json::parse(c.read_until("saved"));
  CHECK(saved.at("episode") == "teleop_0000");
  const Episode ep = load_episode(dir.path / "teleop_0000");
  CHECK_NOTHROW(ep.validate());
  CHECK(ep.ticks() > 100);
  c.close();
  const ServerStats st = server.stats();
  CHECK(st.sim_steps > 1000);
  server.stop();
}

TEST_CASE("live server: a client that never reads does not stall the 1 kHz loop") {
  ServerOptions so;
  so.port = 0;
  TeleopServer server(teleop_setup(), {}, so);
  const int port = server.start();
  Client idle(port);
  const auto s0 = server.stats().sim_steps;
  std::this_thread::sleep_for(std::chrono::seconds(1));
  const auto steps = server.stats().sim_steps - s0;
  CHECK(steps > 800);
  CHECK(steps < 1200);
  server.stop();
}

TEST_CASE("live server: bind failure is reported") {
  ServerOptions so;
  so.port = 0;
  TeleopServer first(teleop_setup(), {}, so);
  so.port = first.start();
  TeleopServer second(teleop_setup(), {}, so);
  CHECK_THROWS_AS(second.start(), std::runtime_error);
}
