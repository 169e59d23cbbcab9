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

#include "biact/biact_policy.hpp"

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <exception>
#include <mutex>
#include <thread>
#include <utility>

#include "biact/seeding.hpp"

namespace biact {

namespace {

using json = nlohmann::json;

std::string layer(const std::string& prefix, int i) { return prefix + "." + std::to_string(i); }

json stats_json(const ChannelStats& s) { return json{{"mean", s.mean}, {"std", s.std}}; }

ChannelStats stats_from(const json& j) {
  return {j.at("mean").get<std::vector<double>>(), j.at("std").get<std::vector<double>>()};
}

}  // namespace

void PolicyConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("PolicyConfig: " + m); };
  if (d_model < 1 || heads < 1 || d_model % heads != 0) fail("d_model must be a positive multiple of heads");
  if (encoder_layers < 1 || decoder_layers < 1 || cvae_layers < 1) fail("layer counts must be >= 1");
  if (ffn_dim < 1 || latent_dim < 1) fail("ffn_dim and latent_dim must be >= 1");
  if (patch_size < 1 || frame_size < 1 || frame_size % patch_size != 0) {
    fail("patch_size must divide frame_size");
  }
  if (chunk_k < 1) fail("chunk_k must be >= 1");
  if (joints < 2) fail("joints must be >= 2");
  if (!(kl_weight >= 0.0) || !(lr >= 0.0)) fail("kl_weight and lr must be >= 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
}

json PolicyConfig::to_json() const {
  return json{{"d_model", d_model},
              {"heads", heads},
              {"encoder_layers", encoder_layers},
              {"decoder_layers", decoder_layers},
              {"cvae_layers", cvae_layers},
              {"ffn_dim", ffn_dim},
              {"patch_size", patch_size},
              {"frame_size", frame_size},
              {"latent_dim", latent_dim},
              {"chunk_k", chunk_k},
              {"joints", joints},
              {"kl_weight", kl_weight},
              {"lr", lr},
              {"batch_size", batch_size},
              {"dropout", dropout},
              {"use_force", use_force}};
}

PolicyConfig PolicyConfig::from_json(const json& j) {
  PolicyConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.heads = j.at("heads").get<int>();
  c.encoder_layers = j.at("encoder_layers").get<int>();
  c.decoder_layers = j.at("decoder_layers").get<int>();
  c.cvae_layers = j.at("cvae_layers").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.patch_size = j.at("patch_size").get<int>();
  c.frame_size = j.at("frame_size").get<int>();
  c.latent_dim = j.at("latent_dim").get<int>();
  c.chunk_k = j.at("chunk_k").get<int>();
  c.joints = j.at("joints").get<int>();
  c.kl_weight = j.at("kl_weight").get<double>();
  c.lr = j.at("lr").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.use_force = j.at("use_force").get<bool>();
  c.validate();
  return c;
}

std::vector<double> frame_patches(const Frame& frame, int patch_size) {
  if (frame.channels != 1 || frame.width != frame.height || frame.width % patch_size != 0 ||
      frame.pixels.size() != static_cast<std::size_t>(frame.width) * static_cast<std::size_t>(frame.height)) {
    throw ShapeError("frame_patches: frame " + std::to_string(frame.width) + "x" +
                     std::to_string(frame.height) + " does not tile into " +
                     std::to_string(patch_size) + " px patches");
  }
  const int grid = frame.width / patch_size;
  std::vector<double> out;
  out.reserve(frame.pixels.size());
  for (int pr = 0; pr < grid; ++pr) {
    for (int pc = 0; pc < grid; ++pc) {
      for (int r = 0; r < patch_size; ++r) {
        for (int c = 0; c < patch_size; ++c) {
          const int row = pr * patch_size + r, col = pc * patch_size + c;
          out.push_back(frame.pixels[static_cast<std::size_t>(row * frame.width + col)] / 255.0);
        }
      }
    }
  }
  return out;
}

BiActPolicy::BiActPolicy(PolicyConfig config, NormalizationStats stats, std::uint64_t seed)
    : config_(config), stats_(std::move(stats)), rng_(seed) {
  config_.validate();
  const auto S = static_cast<std::size_t>(config_.state_dim());
  if (stats_.follower.mean.size() != S || stats_.leader.mean.size() != S ||
      stats_.follower.std.size() != S || stats_.leader.std.size() != S) {
    throw ShapeError("BiActPolicy: normalization stats have " +
                     std::to_string(stats_.follower.mean.size()) + " channels, config needs " +
                     std::to_string(S));
  }
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto f = static_cast<std::size_t>(config_.ffn_dim);
  const auto z = static_cast<std::size_t>(config_.latent_dim);
  const auto k = static_cast<std::size_t>(config_.chunk_k);
  const auto pp = static_cast<std::size_t>(config_.patch_size * config_.patch_size);
  const auto P = static_cast<std::size_t>(config_.patches_per_frame());

  auto linear = [&](const std::string& name, std::size_t in, std::size_t out, const char* init) {
    add_param(name + ".w", {in, out}, init);
    add_param(name + ".b", {out}, "zeros");
  };
  auto norm = [&](const std::string& name) {
    add_param(name + ".g", {d}, "ones");
    add_param(name + ".b", {d}, "zeros");
  };
  auto encoder_layer = [&](const std::string& p) {
    norm(p + ".ln1");
    linear(p + ".attn.qkv", d, 3 * d, "xavier");
    linear(p + ".attn.o", d, d, "xavier");
    norm(p + ".ln2");
    linear(p + ".ffn.1", d, f, "xavier");
    linear(p + ".ffn.2", f, d, "xavier");
  };

  linear("patch", pp, d, "xavier");
  add_param("pos.cell", {P, d}, "small");
  add_param("pos.camera", {2, d}, "small");
  linear("state", S, d, "xavier");
  add_param("pos.state", {d}, "small");
  linear("latent", z, d, "xavier");
  add_param("pos.latent", {d}, "small");
  for (int i = 0; i < config_.encoder_layers; ++i) encoder_layer(layer("enc", i));
  norm("enc.ln");
  add_param("dec.query", {k, d}, "small");
  for (int i = 0; i < config_.decoder_layers; ++i) {
    const std::string p = layer("dec", i);
    norm(p + ".ln1");
    linear(p + ".self.qkv", d, 3 * d, "xavier");
    linear(p + ".self.o", d, d, "xavier");
    norm(p + ".ln2");
    linear(p + ".cross.q", d, d, "xavier");
    linear(p + ".cross.kv", d, 2 * d, "xavier");
    linear(p + ".cross.o", d, d, "xavier");
    norm(p + ".ln3");
    linear(p + ".ffn.1", d, f, "xavier");
    linear(p + ".ffn.2", f, d, "xavier");
  }
  norm("dec.ln");
  linear("head", d, S, "zeros");

  linear("cvae.action", S, d, "xavier");
  linear("cvae.state", S, d, "xavier");
  add_param("cvae.pos", {k + 1, d}, "small");
  for (int i = 0; i < config_.cvae_layers; ++i) encoder_layer(layer("cvae", i));
  norm("cvae.ln");
  linear("cvae.head", d, 2 * z, "zeros");
}

void BiActPolicy::add_param(const std::string& name, Shape shape, const std::string& init) {
  const std::size_t n = shape_numel(shape);
  std::vector<double> v(n, 0.0);
  if (init == "ones") {
    v.assign(n, 1.0);
  } else if (init == "xavier") {
    const double limit = std::sqrt(6.0 / static_cast<double>(shape[0] + shape[1]));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (double& x : v) x = u(rng_);
  } else if (init == "small") {
    std::uniform_real_distribution<double> u(-0.02, 0.02);
    for (double& x : v) x = u(rng_);
  }
  index_[name] = params_.size();
  params_.push_back({name, Tensor::parameter(std::move(shape), std::move(v))});
}

std::vector<Tensor> BiActPolicy::parameter_tensors() const {
  std::vector<Tensor> out;
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

Tensor& BiActPolicy::param(const std::string& name) { return const_cast<Tensor&>(w(name)); }

std::size_t BiActPolicy::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

const Tensor& BiActPolicy::w(const std::string& name) const {
  const auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
  return params_[it->second].tensor;
}

PolicyInput BiActPolicy::make_input(std::span<const SampledObservation> obs) const {
  if (obs.empty()) throw std::invalid_argument("make_input: empty batch");
  const auto B = obs.size();
  const auto S = static_cast<std::size_t>(config_.state_dim());
  const auto P = static_cast<std::size_t>(config_.patches_per_frame());
  const auto pp = static_cast<std::size_t>(config_.patch_size * config_.patch_size);
  std::vector<double> state, over, grip;
  state.reserve(B * S);
  over.reserve(B * P * pp);
  grip.reserve(B * P * pp);
  for (const auto& o : obs) {
    if (o.follower_state.size() != S) {
      throw ShapeError("make_input: follower state has " + std::to_string(o.follower_state.size()) +
                       " values, policy expects " + std::to_string(S));
    }
    if (o.overhead.width != config_.frame_size || o.gripper_view.width != config_.frame_size) {
      throw ShapeError("make_input: frames are " + std::to_string(o.overhead.width) +
                       " px, policy expects " + std::to_string(config_.frame_size));
    }
    state.insert(state.end(), o.follower_state.begin(), o.follower_state.end());
    const auto a = frame_patches(o.overhead, config_.patch_size);
    const auto b = frame_patches(o.gripper_view, config_.patch_size);
    over.insert(over.end(), a.begin(), a.end());
    grip.insert(grip.end(), b.begin(), b.end());
  }
  if (!config_.use_force) {
    const auto j = static_cast<std::size_t>(config_.joints);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t c = 2 * j; c < 3 * j; ++c) state[b * S + c] = 0.0;
    }
  }
  return {Tensor({B, S}, std::move(state)), Tensor({B, P, pp}, std::move(over)),
          Tensor({B, P, pp}, std::move(grip))};
}

PolicyInput BiActPolicy::make_input(const Batch& batch) const {
  std::vector<SampledObservation> obs;
  obs.reserve(batch.samples.size());
  for (const auto& s : batch.samples) obs.push_back(s.observation);
  return make_input(obs);
}

Tensor BiActPolicy::dropout_if(const Tensor& x) const {
  if (!training_ || config_.dropout == 0.0) return x;
  return dropout(x, config_.dropout, rng_);
}

Tensor BiActPolicy::frame_tokens(const Tensor& patches, int camera) const {
  const auto d = static_cast<std::size_t>(config_.d_model);
  Tensor t = add(matmul(patches, w("patch.w")), w("patch.b"));
  t = add(t, w("pos.cell"));
  return add(t, reshape(slice(w("pos.camera"), 0, static_cast<std::size_t>(camera), 1), {d}));
}

Tensor BiActPolicy::encode_observation(const PolicyInput& in) const {
  const auto B = in.batch();
  const auto d = static_cast<std::size_t>(config_.d_model);
  Tensor s = add(add(matmul(in.state, w("state.w")), w("state.b")), w("pos.state"));
  const Tensor parts[] = {frame_tokens(in.overhead, 0), frame_tokens(in.gripper, 1),
                          reshape(s, {B, 1, d})};
  return concat(parts, 1);
}

Tensor BiActPolicy::attention(const Tensor& q_in, const Tensor& kv_in, const std::string& prefix,
                              bool self) const {
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto H = static_cast<std::size_t>(config_.heads);
  Tensor q, k, v;
  if (self) {
    const Tensor qkv = add(matmul(q_in, w(prefix + ".qkv.w")), w(prefix + ".qkv.b"));
    q = slice(qkv, -1, 0, d);
    k = slice(qkv, -1, d, d);
    v = slice(qkv, -1, 2 * d, d);
  } else {
    q = add(matmul(q_in, w(prefix + ".q.w")), w(prefix + ".q.b"));
    const Tensor kv = add(matmul(kv_in, w(prefix + ".kv.w")), w(prefix + ".kv.b"));
    k = slice(kv, -1, 0, d);
    v = slice(kv, -1, d, d);
  }
  const double inv = 1.0 / std::sqrt(static_cast<double>(d / H));
  const Tensor att = softmax(scale(matmul(split_heads(q, H), split_heads(k, H), true), inv));
  const Tensor o = merge_heads(matmul(dropout_if(att), split_heads(v, H)), H);
  return add(matmul(o, w(prefix + ".o.w")), w(prefix + ".o.b"));
}

Tensor BiActPolicy::ffn(const Tensor& x, const std::string& prefix) const {
  const Tensor h = gelu(add(matmul(x, w(prefix + ".1.w")), w(prefix + ".1.b")));
  return add(matmul(dropout_if(h), w(prefix + ".2.w")), w(prefix + ".2.b"));
}

Tensor BiActPolicy::encoder_stack(Tensor x, const std::string& prefix, int layers) const {
  for (int i = 0; i < layers; ++i) {
    const std::string p = layer(prefix, i);
    const Tensor h = layer_norm(x, w(p + ".ln1.g"), w(p + ".ln1.b"));
    x = add(x, dropout_if(attention(h, h, p + ".attn", true)));
    x = add(x, dropout_if(ffn(layer_norm(x, w(p + ".ln2.g"), w(p + ".ln2.b")), p + ".ffn")));
  }
  return layer_norm(x, w(prefix + ".ln.g"), w(prefix + ".ln.b"));
}

BiActPolicy::Posterior BiActPolicy::cvae_encode(const Tensor& chunk, const Tensor& state) const {
  const auto k = static_cast<std::size_t>(config_.chunk_k);
  const auto S = static_cast<std::size_t>(config_.state_dim());
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto z = static_cast<std::size_t>(config_.latent_dim);
  if (chunk.rank() != 3 || chunk.dim(1) != k || chunk.dim(2) != S || state.rank() != 2 ||
      state.dim(0) != chunk.dim(0) || state.dim(1) != S) {
    throw ShapeError("cvae_encode: chunk " + shape_str(chunk.shape()) + " and state " +
                     shape_str(state.shape()) + " do not fit k=" + std::to_string(k) +
                     ", width " + std::to_string(S));
  }
  const auto B = chunk.dim(0);
  const Tensor a = add(matmul(chunk, w("cvae.action.w")), w("cvae.action.b"));
  const Tensor s = add(matmul(state, w("cvae.state.w")), w("cvae.state.b"));
  const Tensor parts[] = {reshape(s, {B, 1, d}), a};
  Tensor x = add(concat(parts, 1), w("cvae.pos"));
  x = encoder_stack(x, "cvae", config_.cvae_layers);
  const Tensor out = add(matmul(mean(x, 1), w("cvae.head.w")), w("cvae.head.b"));
  return {slice(out, 1, 0, z), slice(out, 1, z, z)};
}

Tensor BiActPolicy::predict_chunk(const Tensor& obs_tokens, const Tensor& z) const {
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto k = static_cast<std::size_t>(config_.chunk_k);
  if (obs_tokens.rank() != 3 || obs_tokens.dim(2) != d || z.rank() != 2 ||
      z.dim(0) != obs_tokens.dim(0) || z.dim(1) != static_cast<std::size_t>(config_.latent_dim)) {
    throw ShapeError("predict_chunk: tokens " + shape_str(obs_tokens.shape()) + " and latent " +
                     shape_str(z.shape()) + " do not fit the config");
  }
  const auto B = obs_tokens.dim(0);
  const Tensor zt = add(add(matmul(z, w("latent.w")), w("latent.b")), w("pos.latent"));
  const Tensor parts[] = {reshape(zt, {B, 1, d}), obs_tokens};
  const Tensor memory = encoder_stack(concat(parts, 1), "enc", config_.encoder_layers);

  Tensor q = add(Tensor::zeros({B, k, d}), w("dec.query"));
  for (int i = 0; i < config_.decoder_layers; ++i) {
    const std::string p = layer("dec", i);
    const Tensor h1 = layer_norm(q, w(p + ".ln1.g"), w(p + ".ln1.b"));
    q = add(q, dropout_if(attention(h1, h1, p + ".self", true)));
    const Tensor h2 = layer_norm(q, w(p + ".ln2.g"), w(p + ".ln2.b"));
    q = add(q, dropout_if(attention(h2, memory, p + ".cross", false)));
    q = add(q, dropout_if(ffn(layer_norm(q, w(p + ".ln3.g"), w(p + ".ln3.b")), p + ".ffn")));
  }
  q = layer_norm(q, w("dec.ln.g"), w("dec.ln.b"));
  return add(matmul(q, w("head.w")), w("head.b"));
}

BiActPolicy::Losses BiActPolicy::loss(const Batch& batch, const Tensor& eps) const {
  const auto B = batch.samples.size();
  const auto k = static_cast<std::size_t>(config_.chunk_k);
  const auto S = static_cast<std::size_t>(config_.state_dim());
  const auto J = static_cast<std::size_t>(config_.joints);
  if (batch.chunk != config_.chunk_k || batch.width != S) {
    throw ShapeError("loss: batch has k=" + std::to_string(batch.chunk) + ", width " +
                     std::to_string(batch.width) + "; policy expects k=" + std::to_string(k) +
                     ", width " + std::to_string(S));
  }
  std::vector<double> target, mask, cvae_in;
  target.reserve(B * k * S);
  mask.reserve(B * k * S);
  for (const auto& s : batch.samples) {
    target.insert(target.end(), s.target.begin(), s.target.end());
    for (std::size_t r = 0; r < k; ++r) {
      for (std::size_t c = 0; c < S; ++c) {
        const bool torque = c >= 2 * J;
        mask.push_back(s.pad_mask[r] || (torque && !config_.use_force) ? 0.0 : 1.0);
      }
    }
  }
  cvae_in = target;
  if (!config_.use_force) {
    for (std::size_t i = 0; i < cvae_in.size(); ++i) {
      if (i % S >= 2 * J) cvae_in[i] = 0.0;
    }
  }
  const PolicyInput in = make_input(batch);
  const Tensor target_t({B, k, S}, std::move(target));
  const Posterior post = cvae_encode(Tensor({B, k, S}, std::move(cvae_in)), in.state);
  const Tensor z = add(post.mu, mul(exp(scale(post.logvar, 0.5)), eps));
  const Tensor pred = predict_chunk(encode_observation(in), z);
  Losses l;
  l.l1 = l1_loss(pred, target_t, Tensor({B, k, S}, std::move(mask)));
  l.kl = gaussian_kl(post.mu, post.logvar);
  l.total = add(l.l1, scale(l.kl, config_.kl_weight));
  return l;
}

TrainMetrics BiActPolicy::training_step(const Batch& batch, Adam& optimizer, std::uint64_t noise_seed) {
  const auto B = batch.samples.size();
  const auto z = static_cast<std::size_t>(config_.latent_dim);
  std::mt19937_64 noise(noise_seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::vector<double> eps(B * z);
  for (double& e : eps) e = n01(noise);

  Tape tape;
  TapeScope scope(tape);
  training_ = true;
  Losses l;
  try {
    l = loss(batch, Tensor({B, z}, std::move(eps)));
  } catch (...) {
    training_ = false;
    throw;
  }
  training_ = false;
  TrainMetrics m{l.total.item(), l.l1.item(), l.kl.item()};
  if (!(m.loss_kl >= -1e-12)) throw std::logic_error("training_step: negative KL term");
  if (!std::isfinite(m.loss_total)) throw std::runtime_error("training_step: non-finite loss");
  tape.backward(l.total);
  optimizer.step();
  return m;
}

ActionChunk BiActPolicy::infer(const SampledObservation& obs) const {
  SampledObservation normalized = obs;
  normalized.follower_state = normalize(std::span<const double>(obs.follower_state), stats_.follower);
  NoGradScope no_grad;
  const PolicyInput in = make_input(std::span<const SampledObservation>(&normalized, 1));
  const Tensor zero = Tensor::zeros({1, static_cast<std::size_t>(config_.latent_dim)});
  const Tensor pred = predict_chunk(encode_observation(in), zero);
  ActionChunk chunk;
  chunk.k = config_.chunk_k;
  chunk.width = static_cast<std::size_t>(config_.state_dim());
  chunk.normalized.assign(pred.data().begin(), pred.data().end());
  for (int r = 0; r < chunk.k; ++r) {
    const auto row = std::span<const double>(chunk.normalized)
                         .subspan(static_cast<std::size_t>(r) * chunk.width, chunk.width);
    const auto raw = denormalize(row, stats_.leader);
    chunk.raw.insert(chunk.raw.end(), raw.begin(), raw.end());
  }
  return chunk;
}

ActionChunk BiActPolicy::infer_raw(std::span<const double> follower_state, const Frame& overhead,
                                   const Frame& gripper) const {
  SampledObservation obs;
  obs.follower_state.assign(follower_state.begin(), follower_state.end());
  obs.overhead = overhead;
  obs.gripper_view = gripper;
  return infer(obs);
}

Adam BiActPolicy::make_optimizer() const {
  return Adam(parameter_tensors(), AdamConfig{config_.lr, 0.9, 0.999, 1e-8});
}

void BiActPolicy::save(const std::filesystem::path& path) const {
  CheckpointFile f;
  f.extra = json{{"kind", "biact_policy"},
                 {"config", config_.to_json()},
                 {"normalization",
                  {{"follower", stats_json(stats_.follower)}, {"leader", stats_json(stats_.leader)}}}};
  f.tensors = params_;
  write_checkpoint_file(path, f);
}

BiActPolicy BiActPolicy::load(const std::filesystem::path& path) {
  const CheckpointFile f = read_checkpoint_file(path);
  if (f.extra.value("kind", std::string()) != "biact_policy") {
    throw CheckpointError(path.string() + ": not a policy checkpoint");
  }
  PolicyConfig cfg;
  NormalizationStats stats;
  try {
    cfg = PolicyConfig::from_json(f.extra.at("config"));
    stats.follower = stats_from(f.extra.at("normalization").at("follower"));
    stats.leader = stats_from(f.extra.at("normalization").at("leader"));
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": bad header: " + e.what());
  }
  BiActPolicy policy(cfg, std::move(stats), 0);
  if (f.tensors.size() != policy.params_.size()) {
    throw CheckpointError(path.string() + ": " + std::to_string(f.tensors.size()) +
                          " tensors, config implies " + std::to_string(policy.params_.size()));
  }
  for (std::size_t i = 0; i < f.tensors.size(); ++i) {
    NamedTensor& dst = policy.params_[i];
    const NamedTensor& src = f.tensors[i];
    if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape()) {
      throw ShapeError(path.string() + ": tensor " + src.name + " " + shape_str(src.tensor.shape()) +
                       " does not match " + dst.name + " " + shape_str(dst.tensor.shape()));
    }
    std::copy(src.tensor.data().begin(), src.tensor.data().end(), dst.tensor.data().begin());
  }
  return policy;
}

BiActPolicy BiActPolicy::load(const std::filesystem::path& path, int joints) {
  BiActPolicy p = load(path);
  if (p.config().joints != joints) {
    throw ShapeError(path.string() + ": checkpoint serves " + std::to_string(p.config().joints) +
                     " joints, scene has " + std::to_string(joints));
  }
  return p;
}

std::vector<TrainMetrics> train_policy(BiActPolicy& policy, const Dataset& data,
                                       const TrainOptions& options) {
  const PolicyConfig& cfg = policy.config();
  Adam opt = policy.make_optimizer();
  std::mutex mu;
  std::condition_variable cv;
  std::deque<Batch> queue;
  bool stop = false;
  std::exception_ptr producer_error;
  constexpr std::size_t kDepth = 2;

  std::thread producer([&] {
    try {
      for (int step = 0; step < options.steps; ++step) {
        Batch b = data.sample_batch(cfg.batch_size, cfg.chunk_k,
                                    mix_seed(options.seed, 2 * static_cast<std::uint64_t>(step)));
        std::unique_lock lock(mu);
        cv.wait(lock, [&] { return stop || queue.size() < kDepth; });
        if (stop) return;
        queue.push_back(std::move(b));
        cv.notify_all();
      }
    } catch (...) {
      std::lock_guard lock(mu);
      producer_error = std::current_exception();
      stop = true;
      cv.notify_all();
    }
  });

  std::vector<TrainMetrics> history;
  history.reserve(static_cast<std::size_t>(std::max(options.steps, 0)));
  try {
    for (int step = 0; step < options.steps; ++step) {
      Batch b;
      {
        std::unique_lock lock(mu);
        cv.wait(lock, [&] { return stop || !queue.empty(); });
        if (queue.empty()) break;  // producer failed
        b = std::move(queue.front());
        queue.pop_front();
        cv.notify_all();
      }
      const auto t0 = std::chrono::steady_clock::now();
      const TrainMetrics m = policy.training_step(
          b, opt, mix_seed(options.seed, 2 * static_cast<std::uint64_t>(step) + 1));
      const double ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      history.push_back(m);
      if (options.on_step) options.on_step(step, m, ms);
    }
  } catch (...) {
    {
      std::lock_guard lock(mu);
      stop = true;
      cv.notify_all();
    }
    producer.join();
    throw;
  }
  {
    std::lock_guard lock(mu);
    stop = true;
    cv.notify_all();
  }
  producer.join();
  if (producer_error) std::rethrow_exception(producer_error);
  return history;
}

}  // namespace biact
