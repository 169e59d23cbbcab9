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
#include <vector>

#include "biact/arm_dynamics.hpp"

namespace biact {

/// Grayscale image, row-major, row 0 at the top.
struct Frame {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;
  double timestamp = 0.0;

  bool operator==(const Frame&) const = default;
};

enum class CameraView { overhead, gripper };

/// Camera and drawing constants.
///
/// Projection: a view window centered at `c` with half extent `h` maps world
/// point (x, y) to continuous image coordinates
///   u = (x - (c.x - h)) / (2h) * width      (columns, left to right)
///   v = ((c.y + h) - y) / (2h) * height     (rows, top to bottom)
/// Pixel (row r, column q) covers [q, q+1) x [r, r+1); its center is at
/// (q + 0.5, r + 0.5). A pixel is painted when its center lies inside a
/// primitive. The overhead window is fixed; the gripper window is centered on
/// the follower end effector.
struct RenderSpec {
  int width = 64;
  int height = 64;
  Vec2 overhead_center{0.2, 0.0};
  double overhead_half_extent = 0.25;
  double gripper_half_extent = 0.06;
  double link_half_width = 0.008;
  double finger_half_width = 0.003;
  double finger_length = 0.03;
  std::optional<Vec2> place_center = Vec2{0.26, 0.1425};
  double place_radius = 0.035;
  double ring_half_width = 0.004;
  std::uint8_t link_value = 150;
  std::uint8_t finger_value = 210;
  std::uint8_t object_value = 255;
  std::uint8_t target_value = 80;

  void validate() const;
};

class SceneRenderer {
 public:
  SceneRenderer(ArmConfig arm, ObjectSpec object, SceneConfig scene, RenderSpec spec = {});

  Frame render(const SceneState& scene, CameraView view) const;

  /// Continuous image coordinates (u, v) of a world point in `view`.
  Vec2 project(const SceneState& scene, CameraView view, Vec2 world) const;

  const RenderSpec& spec() const { return spec_; }

 private:
  struct Window {
    Vec2 center;
    double half_extent;
  };
  Window window(const SceneState& scene, CameraView view) const;

  ArmConfig arm_;
  ObjectSpec object_;
  SceneConfig scene_;
  RenderSpec spec_;
};

/// Samples 0, factor, 2 factor, ... of `series` (no filtering).
template <class T>
std::vector<T> decimate(std::span<const T> series, int factor) {
  if (factor < 1) throw std::invalid_argument("decimate: factor must be >= 1");
  std::vector<T> out;
  out.reserve((series.size() + static_cast<std::size_t>(factor) - 1) /
              static_cast<std::size_t>(factor));
  for (std::size_t i = 0; i < series.size(); i += static_cast<std::size_t>(factor)) {
    out.push_back(series[i]);
  }
  return out;
}

template <class T>
std::vector<T> decimate(const std::vector<T>& series, int factor) {
  return decimate(std::span<const T>(series), factor);
}

/// Index of the latest frame with timestamp <= tick, for every tick
/// (zero-order hold). Frame timestamps must be nondecreasing.
std::vector<std::size_t> align_frame_indices(std::span<const double> frame_times,
                                             std::span<const double> ticks);

std::vector<Frame> align_frames(std::span<const Frame> frames, std::span<const double> ticks);

/// Per-joint angle, velocity and torque channels of one arm.
struct JointChannels {
  std::vector<double> angles;
  std::vector<double> velocities;
  std::vector<double> torques;

  bool operator==(const JointChannels&) const = default;
};

/// Flattens to [all angles, all velocities, all torques]; 3 x joints values.
std::vector<double> pack_channels(const JointChannels& channels);
JointChannels unpack_channels(std::span<const double> packed);

/// Channels of an arm with `torques` taken from the reaction-torque estimates.
JointChannels channels_from(std::span<const JointState> joints, std::span<const double> torques);

struct SampledObservation {
  double timestamp = 0.0;
  std::vector<double> follower_state;  // pack_channels layout
  Frame overhead;
  Frame gripper_view;
};

}  // namespace biact
