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

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// Operations record onto the tape installed by a TapeScope on the calling
// thread, and only when at least one input is tracked (a parameter, or the
// output of a recorded op). With no active tape every op is a plain forward
// computation, which is how inference runs.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace biact {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tape;

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient flows in
  bool requires_grad = false;
  std::int64_t node = -1;
  const Tape* tape = nullptr;

  double* grad_buffer();  // allocates zeros on first use
};
}  // namespace detail

class Tensor {
 public:
  Tensor() : Tensor(Shape{}, std::vector<double>{0.0}) {}
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value) { return Tensor({}, {value}); }
  /// A leaf that collects gradients.
  static Tensor parameter(Shape shape, std::vector<double> data);

  const Shape& shape() const { return p_->shape; }
  std::size_t rank() const { return p_->shape.size(); }
  /// Size of dimension `i`; negative indices count from the back.
  std::size_t dim(int i) const;
  std::size_t numel() const { return p_->data.size(); }

  std::span<double> data() { return p_->data; }
  std::span<const double> data() const { return p_->data; }
  double item() const;

  /// Empty when no gradient reached this tensor.
  std::span<const double> grad() const { return p_->grad; }
  std::span<double> mutable_grad() { return {p_->grad_buffer(), numel()}; }
  void zero_grad() { p_->grad.clear(); }

  bool requires_grad() const { return p_->requires_grad; }
  bool tracked() const { return p_->requires_grad || p_->node >= 0; }
  std::optional<std::int64_t> node_id() const;

  /// Untracked deep copy.
  Tensor detach() const { return Tensor(shape(), p_->data); }

  detail::TensorImpl& impl() const { return *p_; }
  const std::shared_ptr<detail::TensorImpl>& handle() const { return p_; }

 private:
  std::shared_ptr<detail::TensorImpl> p_;
};

class Tape {
 public:
  using Backward = std::function<void()>;

  /// Appends a node producing `out`; returns its id.
  std::int64_t record(const Tensor& out, Backward backward);

  /// Seeds d(loss)/d(loss) = 1 and runs every node once, newest first.
  /// The tape is consumed; a second call needs a fresh forward pass.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }
  void clear();

 private:
  struct Node {
    std::shared_ptr<detail::TensorImpl> out;
    Backward backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

/// Installs `tape` as the active tape of this thread for the scope lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Suspends recording on this thread for the scope lifetime.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

// Elementwise; the smaller operand may match a trailing suffix of the larger
// one's shape and is then broadcast over the leading dimensions.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor exp(const Tensor& a);

/// a: [..., m, k]. b: [k, n] shared across a's leading dims, or [..., k, n]
/// with the same leading dims as a. With transpose_b the last two dims of b
/// are read as [n, k].
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor relu(const Tensor& x);
/// 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x);  // last axis, max-subtracted

inline constexpr double kLayerNormVarianceFloor = 1e-6;
/// Normalizes the last axis with variance floored at kLayerNormVarianceFloor,
/// then applies gamma and beta (both shaped like the last axis).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);  // 2-D only
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x, int axis);
Tensor sum(const Tensor& x);   // all elements, scalar
Tensor mean(const Tensor& x);  // all elements, scalar

/// [B, T, H*d] -> [B*H, T, d] and back.
Tensor split_heads(const Tensor& x, std::size_t heads);
Tensor merge_heads(const Tensor& x, std::size_t heads);

/// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

/// Mean of |pred - target| over entries where mask != 0. All three share a
/// shape. Throws when nothing is unmasked.
Tensor l1_loss(const Tensor& pred, const Tensor& target, const Tensor& mask);

/// -1/2 sum(1 + logvar - mu^2 - exp(logvar)) over the last axis, averaged over
/// the leading (batch) entries.
Tensor gaussian_kl(const Tensor& mu, const Tensor& logvar);

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update at step t >= 1.
void adam_step(std::span<double> params, std::span<const double> grads, std::span<double> m,
               std::span<double> v, const AdamConfig& cfg, std::int64_t t);

/// Adam over a fixed parameter list; consumes and clears their gradients.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamConfig cfg);
  void step();
  std::int64_t steps() const { return t_; }
  AdamConfig& config() { return cfg_; }

 private:
  std::vector<Tensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

// Checkpoint file: 8-byte magic "BIACTCKP", u32 version, u32 header length,
// UTF-8 JSON header {"extra": ..., "tensors": [{"name", "shape"}, ...]}, then
// each tensor's data as little-endian float64 in header order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct CheckpointFile {
  nlohmann::json extra;
  std::vector<NamedTensor> tensors;
};

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file);
CheckpointFile read_checkpoint_file(const std::filesystem::path& path);

}  // namespace biact
