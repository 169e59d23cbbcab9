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

// Action-chunking transformer with a CVAE latent.
//
// Observation tokens: each camera frame is cut into non-overlapping patches,
// linearly embedded, and offset by a learned per-cell positional table plus a
// per-camera vector. The follower state adds one more token. The latent z
// becomes a further token in front of the encoder. The decoder cross-attends
// chunk_k learned queries to the encoder memory and maps each to one leader
// row (angles, velocities, torques; normalized units).

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "biact/episode_store.hpp"
#include "biact/tensor_autodiff.hpp"

namespace biact {

struct PolicyConfig {
  int d_model = 64;
  int heads = 4;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int cvae_layers = 1;
  int ffn_dim = 128;
  int patch_size = 8;
  int frame_size = 64;  // square frames
  int latent_dim = 16;
  int chunk_k = 20;
  int joints = 3;  // dof + gripper
  double kl_weight = 10.0;
  double lr = 1e-4;
  int batch_size = 8;
  double dropout = 0.0;
  /// false trains the w/o-force variant: torque inputs are zeroed and torque
  /// targets are excluded from the loss.
  bool use_force = true;

  int state_dim() const { return 3 * joints; }
  int patches_per_frame() const { return (frame_size / patch_size) * (frame_size / patch_size); }
  int observation_tokens() const { return 2 * patches_per_frame() + 1; }

  void validate() const;
  nlohmann::json to_json() const;
  static PolicyConfig from_json(const nlohmann::json& j);
  bool operator==(const PolicyConfig&) const = default;
};

/// Batched policy inputs; state is normalized.
struct PolicyInput {
  Tensor state;     // [B, S]
  Tensor overhead;  // [B, P, patch*patch] pixel values scaled to [0, 1]
  Tensor gripper;   // [B, P, patch*patch]

  std::size_t batch() const { return state.dim(0); }
};

struct TrainMetrics {
  double loss_total = 0.0;
  double loss_l1 = 0.0;
  double loss_kl = 0.0;
};

/// One predicted chunk for a single observation.
struct ActionChunk {
  int k = 0;
  std::size_t width = 0;
  std::vector<double> normalized;  // k x width
  std::vector<double> raw;         // denormalized with the policy's stats

  std::span<const double> raw_row(int i) const {
    return std::span<const double>(raw).subspan(static_cast<std::size_t>(i) * width, width);
  }
};

class BiActPolicy {
 public:
  BiActPolicy(PolicyConfig config, NormalizationStats stats, std::uint64_t seed);
  // Tensors share storage on copy, so copies would alias parameters.
  BiActPolicy(const BiActPolicy&) = delete;
  BiActPolicy& operator=(const BiActPolicy&) = delete;
  BiActPolicy(BiActPolicy&&) = default;
  BiActPolicy& operator=(BiActPolicy&&) = default;

  const PolicyConfig& config() const { return config_; }
  const NormalizationStats& stats() const { return stats_; }

  /// Parameters in a fixed order; names are stable and appear in checkpoints.
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::vector<Tensor> parameter_tensors() const;
  Tensor& param(const std::string& name);
  std::size_t parameter_count() const;

  PolicyInput make_input(std::span<const SampledObservation> obs) const;
  /// Also builds inputs from a batch; zeroes torque inputs for the w/o-force variant.
  PolicyInput make_input(const Batch& batch) const;

  /// [B, 2P + 1, d]: overhead patches, gripper patches, state token.
  Tensor encode_observation(const PolicyInput& in) const;

  struct Posterior {
    Tensor mu;      // [B, z]
    Tensor logvar;  // [B, z]
  };
  /// chunk: [B, k, S] normalized leader rows; state: [B, S].
  Posterior cvae_encode(const Tensor& chunk, const Tensor& state) const;

  /// [B, k, S] for the given observation tokens and latent [B, z].
  Tensor predict_chunk(const Tensor& obs_tokens, const Tensor& z) const;

  /// Full training loss with the latent drawn from the posterior with noise
  /// `eps` ([B, z]). Records on the active tape if any.
  struct Losses {
    Tensor total, l1, kl;
  };
  Losses loss(const Batch& batch, const Tensor& eps) const;

  /// One Adam step on `batch`; the latent noise is seeded by `noise_seed`.
  TrainMetrics training_step(const Batch& batch, Adam& optimizer, std::uint64_t noise_seed);

  /// Deterministic z = 0 prediction; records nothing.
  ActionChunk infer(const SampledObservation& obs) const;
  /// Raw (unnormalized) follower state variant used by the executor.
  ActionChunk infer_raw(std::span<const double> follower_state, const Frame& overhead,
                        const Frame& gripper) const;

  Adam make_optimizer() const;

  void save(const std::filesystem::path& path) const;
  static BiActPolicy load(const std::filesystem::path& path);
  /// As load, but throws ShapeError unless the checkpoint serves `joints` joints.
  static BiActPolicy load(const std::filesystem::path& path, int joints);

 private:
  const Tensor& w(const std::string& name) const;
  Tensor attention(const Tensor& q_in, const Tensor& kv_in, const std::string& prefix,
                   bool self) const;
  Tensor ffn(const Tensor& x, const std::string& prefix) const;
  Tensor encoder_stack(Tensor x, const std::string& prefix, int layers) const;
  Tensor dropout_if(const Tensor& x) const;
  Tensor frame_tokens(const Tensor& patches, int camera) const;
  void add_param(const std::string& name, Shape shape, const std::string& init);

  PolicyConfig config_;
  NormalizationStats stats_;
  std::vector<NamedTensor> params_;
  std::map<std::string, std::size_t> index_;
  mutable std::mt19937_64 rng_;
  bool training_ = false;
};

/// Patches of a square grayscale frame, row-major patch order, pixels / 255.
std::vector<double> frame_patches(const Frame& frame, int patch_size);

/// Training loop with a producer thread assembling batches ahead of the
/// optimizer through a queue of at most two batches.
struct TrainOptions {
  int steps = 1000;
  std::uint64_t seed = 0;
  /// Called after every step with (step, metrics, wall ms of the step).
  std::function<void(int, const TrainMetrics&, double)> on_step;
};

std::vector<TrainMetrics> train_policy(BiActPolicy& policy, const Dataset& data,
                                       const TrainOptions& options);

}  // namespace biact
