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

// Small configurations and synthetic data shared by the policy unit tests and
// the acceptance runner.

#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "biact/biact_policy.hpp"
#include "biact/episode_store.hpp"

namespace biact::testing {

/// d_model 8, one layer everywhere, k = 2, 8x8 frames cut into 4 px patches.
inline PolicyConfig tiny_config() {
  PolicyConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 1;
  c.cvae_layers = 1;
  c.ffn_dim = 16;
  c.patch_size = 4;
  c.frame_size = 8;
  c.latent_dim = 4;
  c.chunk_k = 2;
  c.joints = 3;
  return c;
}

inline NormalizationStats unit_stats(std::size_t width) {
  ChannelStats s{std::vector<double>(width, 0.0), std::vector<double>(width, 1.0)};
  return {s, s};
}

inline std::vector<double> uniform_values(std::size_t n, std::uint64_t seed, double lo = -1.0,
                                          double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

inline Frame blank_frame(int side) {
  Frame f;
  f.width = f.height = side;
  f.pixels.assign(static_cast<std::size_t>(side * side), 0);
  return f;
}

inline Frame noise_frame(int side, std::uint64_t seed) {
  Frame f = blank_frame(side);
  std::mt19937_64 rng(seed);
  for (auto& p : f.pixels) p = static_cast<std::uint8_t>(rng() & 0xff);
  return f;
}

inline SampledObservation random_observation(int side, std::uint64_t seed) {
  SampledObservation o;
  o.follower_state = uniform_values(9, seed);
  o.overhead = noise_frame(side, seed + 1);
  o.gripper_view = noise_frame(side, seed + 2);
  return o;
}

/// Replaces every parameter (including the zero-initialized heads) with
/// uniform noise so gradients are non-degenerate everywhere.
inline void randomize(BiActPolicy& policy, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (const auto& p : policy.parameters()) {
    for (double& v : const_cast<Tensor&>(p.tensor).data()) v = u(rng);
  }
}

/// Episodes with smooth joint series and 8x8 frames whose content tracks the tick.
inline Episode tiny_episode(std::size_t ticks, std::uint64_t seed, int side = 8) {
  Episode ep;
  ep.meta.seed = seed;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0.0, 6.28);
  std::vector<double> ph(18);
  for (double& p : ph) p = phase(rng);
  for (std::size_t t = 0; t < ticks; ++t) {
    for (std::size_t c = 0; c < 9; ++c) {
      ep.follower_series.push_back(static_cast<float>(std::sin(0.1 * t + ph[c]) + 0.1 * c));
      ep.leader_series.push_back(static_cast<float>(std::cos(0.1 * t + ph[9 + c]) - 0.1 * c));
    }
    Frame f = blank_frame(side);
    for (std::size_t i = 0; i < f.pixels.size(); ++i) {
      f.pixels[i] = static_cast<std::uint8_t>((t * 17 + i * 5 + seed * 31) % 256);
    }
    ep.overhead_frames.push_back(f);
    for (auto& p : f.pixels) p = static_cast<std::uint8_t>(255 - p);
    ep.gripper_frames.push_back(f);
  }
  ep.finalize();
  return ep;
}

inline Dataset tiny_dataset(std::size_t episodes, std::size_t ticks) {
  std::vector<Episode> eps;
  for (std::size_t i = 0; i < episodes; ++i) eps.push_back(tiny_episode(ticks, 100 + i));
  return Dataset(std::move(eps));
}

struct OverfitResult {
  double initial = 0.0;
  double final_l1 = 0.0;
};

/// 200 Adam steps on one repeated batch with d_model 16 and k = 4; L1 is
/// measured at step 0 and after the last update with the same latent noise.
inline OverfitResult run_overfit_oracle(std::uint64_t seed) {
  PolicyConfig cfg = tiny_config();
  cfg.d_model = 16;
  cfg.ffn_dim = 32;
  cfg.chunk_k = 4;
  cfg.lr = 3e-3;
  cfg.batch_size = 8;
  const Dataset ds = tiny_dataset(2, 30);
  const Batch batch = ds.sample_batch(cfg.batch_size, cfg.chunk_k, seed);
  BiActPolicy policy(cfg, ds.stats(), seed);
  Adam opt = policy.make_optimizer();
  OverfitResult r;
  for (int step = 0; step < 200; ++step) {
    const TrainMetrics m = policy.training_step(batch, opt, seed + 7);
    if (step == 0) r.initial = m.loss_l1;
  }
  std::mt19937_64 noise(seed + 7);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> eps(static_cast<std::size_t>(cfg.batch_size * cfg.latent_dim));
  for (double& e : eps) e = n01(noise);
  r.final_l1 = policy
                   .loss(batch, Tensor({static_cast<std::size_t>(cfg.batch_size),
                                        static_cast<std::size_t>(cfg.latent_dim)},
                                       std::move(eps)))
                   .l1.item();
  return r;
}

}  // namespace biact::testing
