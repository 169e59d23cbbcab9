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

// Scene helpers and scripted chunk sources shared by the runtime unit tests and
// the acceptance runner.

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "biact/runtime.hpp"

namespace biact::testing {

inline SceneSetup setup_with(const std::string& object) {
  SceneSetup s;
  s.object = parse_object_spec(object);
  return s;
}

/// Returns a chunk whose every entry equals the tick it was requested at, and
/// counts the calls.
class CountingSource : public ChunkSource {
 public:
  explicit CountingSource(int k, std::size_t width = 9) : k_(k), width_(width) {}
  ActionChunk predict(const SampledObservation&, int tick) override {
    ticks.push_back(tick);
    ActionChunk c;
    c.k = k_;
    c.width = width_;
    c.raw.assign(static_cast<std::size_t>(k_) * width_, 0.0);
    // Angles hold the request tick; other channels stay 0 so the arm barely moves.
    for (int r = 0; r < k_; ++r) {
      for (std::size_t j = 0; j < width_ / 3; ++j) {
        c.raw[static_cast<std::size_t>(r) * width_ + j] = 1e-3 * tick;
      }
    }
    return c;
  }
  int chunk_length() const override { return k_; }
  std::vector<int> ticks;

 private:
  int k_;
  std::size_t width_;
};

inline double ee_rms(const Episode& ep, const ExecutionResult& r, const ArmConfig& arm) {
  const std::size_t n = std::min<std::size_t>(ep.ticks(), r.trajectory.size());
  double acc = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const auto row = ep.follower_row(t);
    const std::vector<double> q{row[0], row[1]};
    const Vec2 rec = forward_kinematics(q, arm);
    const Vec2 got = r.trajectory[t].ee;
    acc += (rec.x - got.x) * (rec.x - got.x) + (rec.y - got.y) * (rec.y - got.y);
  }
  return std::sqrt(acc / static_cast<double>(n));
}

}  // namespace biact::testing
