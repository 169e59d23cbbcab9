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

// Live teleoperation over a WebSocket. TeleopSession is the protocol and
// simulation core, advanced in lockstep by its owner; TeleopServer runs one
// session on a paced 1 kHz thread and exchanges JSON text frames with
// browser clients through bounded queues.
//
// Protocol, version 1 (one JSON object per text frame):
//   server -> client  {"type":"hello","version":1}            once, on connect
//                     {"type":"state","t":..,"leader":[..],"follower":[..],
//                      "tau_res_l":[..],"tau_res_f":[..],"object":[x,y],
//                      "held":b,"recording":b}                 30 Hz
//                     {"type":"saved","episode":name,"ticks":n} after record stop
//                     {"type":"error","msg":text}
//   client -> server  {"type":"target","x":m,"y":m,"grip":g}   g in [0, 1]
//                     {"type":"record","action":"start"|"stop"|"discard"}
//                     {"type":"reset"}

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "biact/bilateral_control.hpp"
#include "biact/runtime.hpp"

namespace biact {

inline constexpr int kProtocolVersion = 1;

/// FIFO that keeps only the newest `bound` items; pushing into a full queue
/// evicts the oldest. Safe for one producer and one consumer thread.
template <typename T>
class DropOldestQueue {
 public:
  explicit DropOldestQueue(std::size_t bound) : bound_(bound) {}

  /// Returns the number of items evicted (0 or 1).
  std::size_t push(T item) {
    std::lock_guard lock(mutex_);
    std::size_t dropped = 0;
    if (items_.size() >= bound_) {
      items_.pop_front();
      dropped = 1;
    }
    items_.push_back(std::move(item));
    return dropped;
  }

  std::optional<T> try_pop() {
    std::lock_guard lock(mutex_);
    if (items_.empty()) return std::nullopt;
    T out = std::move(items_.front());
    items_.pop_front();
    return out;
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return items_.size();
  }
  std::size_t bound() const { return bound_; }

 private:
  std::size_t bound_;
  mutable std::mutex mutex_;
  std::deque<T> items_;
};

/// Inbound client messages in arrival order, except that consecutive target
/// messages collapse to the latest one. Non-target messages beyond `bound`
/// are refused.
class InboundMailbox {
 public:
  struct Item {
    std::uint64_t client = 0;
    std::string text;
    bool is_target = false;
  };

  explicit InboundMailbox(std::size_t bound = 64) : bound_(bound) {}

  /// False when the mailbox is full.
  bool push(Item item);
  std::vector<Item> drain();

 private:
  std::size_t bound_;
  std::mutex mutex_;
  std::deque<Item> items_;
};

/// True when `text` is a JSON object whose "type" is "target".
bool is_target_message(const std::string& text);

struct TeleopOptions {
  std::filesystem::path out_dir;  // empty disables recording
  std::string episode_prefix = "teleop";
  int state_rate = 30;  // Hz
  OperatorModel op;
  QualityGate gate;
};

class TeleopSession {
 public:
  TeleopSession(SceneSetup setup, TeleopOptions options);

  static std::string hello_frame();

  /// Applies one client message; returns the reply frames (errors, saves).
  std::vector<std::string> handle(const std::string& text);

  /// One 1 kHz control period with the operator spring pulling the leader
  /// toward the current target.
  void step();

  /// The state frame if one falls due on the step just taken (`state_rate`
  /// frames per simulated second, the first at t = 0).
  std::optional<std::string> poll_state() const;
  std::string state_frame() const;

  const SceneState& scene() const { return loop_->state(); }
  const BilateralLoop& loop() const { return *loop_; }
  const std::vector<double>& leader_targets() const { return targets_; }
  bool recording() const { return recording_; }
  int episodes_saved() const { return saved_; }

 private:
  std::string error(const std::string& msg) const;
  std::vector<std::string> on_target(const nlohmann::json& msg);
  std::vector<std::string> on_record(const nlohmann::json& msg);
  void reset();
  void stop_recording();

  SceneSetup setup_;
  TeleopOptions options_;
  std::unique_ptr<BilateralLoop> loop_;
  std::vector<double> targets_;
  bool recording_ = false;
  std::unique_ptr<EpisodeRecorder> recorder_;
  std::unique_ptr<GateMonitor> monitor_;
  std::int64_t record_steps_ = 0;
  int saved_ = 0;
};

class WsClient;

struct ServerOptions {
  std::string address = "127.0.0.1";
  int port = 8765;  // 0 picks a free port
  std::filesystem::path ui_dir;  // static files served over plain HTTP; empty disables
  std::size_t outbound_bound = 4;
};

struct ServerStats {
  std::int64_t sim_steps = 0;
  std::int64_t frames_dropped = 0;
  std::int64_t overruns = 0;  // times the sim loop fell > 50 ms behind wall clock and resynced
  int clients = 0;
};

/// Runs a TeleopSession at wall-clock 1 kHz behind a WebSocket endpoint. The
/// first connected client controls the scene; later clients only observe.
class TeleopServer {
 public:
  TeleopServer(SceneSetup setup, TeleopOptions options, ServerOptions server);
  ~TeleopServer();
  TeleopServer(const TeleopServer&) = delete;
  TeleopServer& operator=(const TeleopServer&) = delete;

  /// Binds and starts the I/O and simulation threads. Throws std::runtime_error
  /// on bind failure. Returns the bound port.
  int start();
  void stop();
  ServerStats stats() const;

 private:
  friend class WsClient;
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace biact
