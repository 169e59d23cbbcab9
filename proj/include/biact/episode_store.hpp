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

// Demonstration episodes on disk. Layout of an episode directory:
//
//   meta.json                   EpisodeMeta, UTF-8
//   joints.bin                  per tick: follower row then leader row,
//                               3 x joints little-endian float32 each
//   frames/overhead_%06d.pgm    binary PGM (P5), one per tick
//   frames/gripper_%06d.pgm
//
// See docs/format.md for the byte-level table.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "biact/arm_dynamics.hpp"
#include "biact/observation.hpp"

namespace biact {

inline constexpr int kEpisodeFormatVersion = 1;
inline constexpr double kStdFloor = 1e-6;

class StoreError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class TaskKind { pick_place, put_in_drawer };

std::string to_string(TaskKind task);
TaskKind task_from_string(const std::string& s);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;

  bool operator==(const ChannelStats&) const = default;
};

/// Per-channel mean and population standard deviation (floored at kStdFloor)
/// of a row-major [rows x width] series.
ChannelStats compute_stats(std::span<const float> series, std::size_t width);

struct NormalizationStats {
  ChannelStats follower;
  ChannelStats leader;

  bool operator==(const NormalizationStats&) const = default;
};

struct EpisodeMeta {
  int format_version = kEpisodeFormatVersion;
  int dof_plus_gripper = 3;
  double control_rate = 1000.0;
  double sample_rate = 100.0;
  std::int64_t chunk_capable_length = 0;
  ObjectSpec object_spec;
  TaskKind task = TaskKind::pick_place;
  NormalizationStats normalization;
  // Provenance of the recording.
  std::string source = "scripted";
  std::uint64_t seed = 0;
  bool success = false;

  bool operator==(const EpisodeMeta&) const;
};

struct Episode {
  EpisodeMeta meta;
  std::vector<float> follower_series;  // ticks x width
  std::vector<float> leader_series;    // ticks x width
  std::vector<Frame> overhead_frames;
  std::vector<Frame> gripper_frames;

  std::size_t width() const { return 3 * static_cast<std::size_t>(meta.dof_plus_gripper); }
  std::size_t ticks() const { return width() == 0 ? 0 : follower_series.size() / width(); }
  std::span<const float> follower_row(std::size_t t) const;
  std::span<const float> leader_row(std::size_t t) const;

  /// Fills chunk_capable_length and normalization stats from the series and
  /// stamps frame timestamps with tick / sample_rate.
  void finalize();

  /// Throws StoreError describing the first violated invariant.
  void validate() const;

  bool operator==(const Episode&) const = default;
};

void save_episode(const Episode& episode, const std::filesystem::path& dir);
Episode load_episode(const std::filesystem::path& dir);

/// Episode directories directly under `root`, sorted by name.
std::vector<std::filesystem::path> list_episodes(const std::filesystem::path& root);

void write_pgm(const Frame& frame, const std::filesystem::path& path);
Frame read_pgm(const std::filesystem::path& path);

/// Writes joints.bin as CSV: tick, t, follower channels, leader channels.
void export_joints_csv(const Episode& episode, std::ostream& os);

/// Count-weighted pooling of per-episode meta statistics.
NormalizationStats pool_stats(std::span<const Episode> episodes);

struct TrainingSample {
  std::size_t episode = 0;
  std::size_t tick = 0;
  SampledObservation observation;  // follower_state normalized
  std::vector<double> target;      // k x width, normalized leader rows
  std::vector<bool> pad_mask;      // k entries; true where the row repeats the final tick
};

struct Batch {
  int chunk = 0;
  std::size_t width = 0;
  std::vector<TrainingSample> samples;
};

/// Read-only view over a set of episodes that serves training batches.
class Dataset {
 public:
  explicit Dataset(std::vector<Episode> episodes);

  const std::vector<Episode>& episodes() const { return episodes_; }
  const NormalizationStats& stats() const { return stats_; }
  std::size_t width() const { return width_; }
  std::size_t total_ticks() const { return offsets_.back(); }

  /// Uniform over all (episode, tick) pairs; deterministic given `seed`.
  Batch sample_batch(int batch_size, int k, std::uint64_t seed) const;

  TrainingSample make_sample(std::size_t episode, std::size_t tick, int k) const;

 private:
  std::vector<Episode> episodes_;
  NormalizationStats stats_;
  std::size_t width_ = 0;
  std::vector<std::size_t> offsets_;  // prefix sums of tick counts
};

std::vector<double> normalize(std::span<const float> row, const ChannelStats& stats);
std::vector<double> normalize(std::span<const double> row, const ChannelStats& stats);
std::vector<double> denormalize(std::span<const double> row, const ChannelStats& stats);

}  // namespace biact
