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

#include "biact/observation.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>

namespace biact {

namespace {

// Squared distance from p to segment ab.
double segment_distance2(Vec2 p, Vec2 a, Vec2 b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((p.x - a.x) * dx + (p.y - a.y) * dy) / len2, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return ex * ex + ey * ey;
}

class Canvas {
 public:
  Canvas(Frame& frame, Vec2 center, double half_extent)
      : f_(frame), center_(center), h_(half_extent) {}

  // World coordinates of the center of pixel (row, col).
  Vec2 world(int row, int col) const {
    const double u = col + 0.5, v = row + 0.5;
    return {center_.x - h_ + u / f_.width * 2.0 * h_, center_.y + h_ - v / f_.height * 2.0 * h_};
  }

  // Pixel rows/cols whose centers may fall within `margin` of the box [lo, hi].
  template <class Inside>
  void paint(Vec2 lo, Vec2 hi, std::uint8_t value, Inside inside) {
    const double sx = f_.width / (2.0 * h_), sy = f_.height / (2.0 * h_);
    const int c0 = std::max(0, static_cast<int>(std::floor((lo.x - (center_.x - h_)) * sx)) - 1);
    const int c1 = std::min(f_.width - 1,
                            static_cast<int>(std::ceil((hi.x - (center_.x - h_)) * sx)) + 1);
    const int r0 = std::max(0, static_cast<int>(std::floor(((center_.y + h_) - hi.y) * sy)) - 1);
    const int r1 = std::min(f_.height - 1,
                            static_cast<int>(std::ceil(((center_.y + h_) - lo.y) * sy)) + 1);
    for (int r = r0; r <= r1; ++r) {
      for (int c = c0; c <= c1; ++c) {
        if (inside(world(r, c))) {
          f_.pixels[static_cast<std::size_t>(r) * static_cast<std::size_t>(f_.width) +
                    static_cast<std::size_t>(c)] = value;
        }
      }
    }
  }

  void segment(Vec2 a, Vec2 b, double half_width, std::uint8_t value) {
    const Vec2 lo{std::min(a.x, b.x) - half_width, std::min(a.y, b.y) - half_width};
    const Vec2 hi{std::max(a.x, b.x) + half_width, std::max(a.y, b.y) + half_width};
    const double w2 = half_width * half_width;
    paint(lo, hi, value, [&](Vec2 p) { return segment_distance2(p, a, b) <= w2; });
  }

  void disc(Vec2 c, double radius, std::uint8_t value) {
    const double r2 = radius * radius;
    paint({c.x - radius, c.y - radius}, {c.x + radius, c.y + radius}, value, [&](Vec2 p) {
      const double dx = p.x - c.x, dy = p.y - c.y;
      return dx * dx + dy * dy <= r2;
    });
  }

  void ring(Vec2 c, double radius, double half_width, std::uint8_t value) {
    const double outer = radius + half_width;
    paint({c.x - outer, c.y - outer}, {c.x + outer, c.y + outer}, value,
          [&](Vec2 p) { return std::abs(std::hypot(p.x - c.x, p.y - c.y) - radius) <= half_width; });
  }

 private:
  Frame& f_;
  Vec2 center_;
  double h_;
};

}  // namespace

void RenderSpec::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("RenderSpec: bad resolution");
  if (!(overhead_half_extent > 0.0) || !(gripper_half_extent > 0.0)) {
    throw std::invalid_argument("RenderSpec: view extents must be > 0");
  }
}

SceneRenderer::SceneRenderer(ArmConfig arm, ObjectSpec object, SceneConfig scene, RenderSpec spec)
    : arm_(std::move(arm)), object_(std::move(object)), scene_(scene), spec_(spec) {
  spec_.validate();
}

SceneRenderer::Window SceneRenderer::window(const SceneState& scene, CameraView view) const {
  if (view == CameraView::overhead) return {spec_.overhead_center, spec_.overhead_half_extent};
  return {forward_kinematics(scene.follower, arm_), spec_.gripper_half_extent};
}

Vec2 SceneRenderer::project(const SceneState& scene, CameraView view, Vec2 world) const {
  const Window w = window(scene, view);
  const double h = w.half_extent;
  return {(world.x - (w.center.x - h)) / (2.0 * h) * spec_.width,
          ((w.center.y + h) - world.y) / (2.0 * h) * spec_.height};
}

Frame SceneRenderer::render(const SceneState& scene, CameraView view) const {
  Frame frame;
  frame.width = spec_.width;
  frame.height = spec_.height;
  frame.channels = 1;
  frame.pixels.assign(static_cast<std::size_t>(spec_.width) * static_cast<std::size_t>(spec_.height),
                      0);
  frame.timestamp = scene.time;
  const Window w = window(scene, view);
  Canvas canvas(frame, w.center, w.half_extent);

  if (spec_.place_center) {
    canvas.ring(*spec_.place_center, spec_.place_radius, spec_.ring_half_width, spec_.target_value);
  }
  if (scene.object_present && !scene.object_crushed) {
    canvas.disc(scene.object_position, object_.radius, spec_.object_value);
  }

  // Follower links from the base to the end effector.
  Vec2 joint{0.0, 0.0};
  double phi = 0.0;
  for (int i = 0; i < arm_.dof; ++i) {
    const auto k = static_cast<std::size_t>(i);
    phi += scene.follower[k].angle;
    const Vec2 next{joint.x + arm_.link_lengths[k] * std::cos(phi),
                    joint.y + arm_.link_lengths[k] * std::sin(phi)};
    canvas.segment(joint, next, spec_.link_half_width, spec_.link_value);
    joint = next;
  }

  // Two fingers parallel to the last link, separated by the current aperture.
  const double gap = std::max(
      0.0, gripper_aperture(scene.follower[static_cast<std::size_t>(arm_.gripper_index())].angle,
                            scene_));
  const Vec2 dir{std::cos(phi), std::sin(phi)};
  const Vec2 normal{-dir.y, dir.x};
  for (double side : {-1.0, 1.0}) {
    const Vec2 base{joint.x + side * 0.5 * gap * normal.x - 0.5 * spec_.finger_length * dir.x,
                    joint.y + side * 0.5 * gap * normal.y - 0.5 * spec_.finger_length * dir.y};
    const Vec2 tip{base.x + spec_.finger_length * dir.x, base.y + spec_.finger_length * dir.y};
    canvas.segment(base, tip, spec_.finger_half_width, spec_.finger_value);
  }
  return frame;
}

std::vector<std::size_t> align_frame_indices(std::span<const double> frame_times,
                                             std::span<const double> ticks) {
  if (frame_times.empty()) throw std::invalid_argument("align_frames: empty frame stream");
  for (std::size_t i = 1; i < frame_times.size(); ++i) {
    if (frame_times[i] < frame_times[i - 1]) {
      throw std::invalid_argument("align_frames: frame timestamps must be nondecreasing");
    }
  }
  std::vector<std::size_t> out;
  out.reserve(ticks.size());
  for (double tick : ticks) {
    const auto it = std::upper_bound(frame_times.begin(), frame_times.end(), tick);
    if (it == frame_times.begin()) {
      throw std::invalid_argument("align_frames: tick " + std::to_string(tick) +
                                  " s precedes the first frame");
    }
    out.push_back(static_cast<std::size_t>(it - frame_times.begin()) - 1);
  }
  return out;
}

std::vector<Frame> align_frames(std::span<const Frame> frames, std::span<const double> ticks) {
  std::vector<double> times;
  times.reserve(frames.size());
  for (const auto& f : frames) times.push_back(f.timestamp);
  std::vector<Frame> out;
  for (std::size_t idx : align_frame_indices(times, ticks)) out.push_back(frames[idx]);
  return out;
}

std::vector<double> pack_channels(const JointChannels& c) {
  if (c.velocities.size() != c.angles.size() || c.torques.size() != c.angles.size()) {
    throw DimensionError("pack_channels: channel lengths differ");
  }
  std::vector<double> out;
  out.reserve(3 * c.angles.size());
  out.insert(out.end(), c.angles.begin(), c.angles.end());
  out.insert(out.end(), c.velocities.begin(), c.velocities.end());
  out.insert(out.end(), c.torques.begin(), c.torques.end());
  return out;
}

JointChannels unpack_channels(std::span<const double> packed) {
  if (packed.size() % 3 != 0) throw DimensionError("unpack_channels: length not a multiple of 3");
  const auto n = packed.size() / 3;
  JointChannels c;
  c.angles.assign(packed.begin(), packed.begin() + static_cast<std::ptrdiff_t>(n));
  c.velocities.assign(packed.begin() + static_cast<std::ptrdiff_t>(n),
                      packed.begin() + static_cast<std::ptrdiff_t>(2 * n));
  c.torques.assign(packed.begin() + static_cast<std::ptrdiff_t>(2 * n), packed.end());
  return c;
}

JointChannels channels_from(std::span<const JointState> joints, std::span<const double> torques) {
  if (torques.size() != joints.size()) throw DimensionError("channels_from: size mismatch");
  JointChannels c;
  for (std::size_t i = 0; i < joints.size(); ++i) {
    c.angles.push_back(joints[i].angle);
    c.velocities.push_back(joints[i].velocity);
    c.torques.push_back(torques[i]);
  }
  return c;
}

}  // namespace biact
