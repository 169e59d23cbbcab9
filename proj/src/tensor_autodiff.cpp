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

#include "biact/tensor_autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <utility>

namespace biact {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;
using Impl = detail::TensorImpl;
using ImplPtr = std::shared_ptr<Impl>;

thread_local Tape* g_active_tape = nullptr;

// A tensor participates in recording when it is a parameter or was produced
// by a node of the active tape.
bool live(const Impl& t, const Tape* tape) {
  return t.requires_grad || (t.node >= 0 && t.tape == tape);
}

Tape* recording_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = g_active_tape;
  if (tape == nullptr) return nullptr;
  for (const Tensor* t : inputs) {
    if (live(t->impl(), tape)) return tape;
  }
  return nullptr;
}

// Whether a backward closure should push gradient into `t`.
bool wants_grad(const Impl& t) { return t.requires_grad || t.node >= 0; }

std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

[[noreturn]] void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

// Product of dims [from, to).
std::size_t span_numel(const Shape& s, std::size_t from, std::size_t to) {
  std::size_t n = 1;
  for (std::size_t i = from; i < to; ++i) n *= s[i];
  return n;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

enum class Binary { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
  const bool a_big = is_suffix(b.shape(), a.shape());
  if (!a_big && !is_suffix(a.shape(), b.shape())) shape_mismatch(name, a.shape(), b.shape());
  const Tensor& big = a_big ? a : b;
  const std::size_t n = big.numel();
  const std::size_t na = a.numel(), nb = b.numel();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  std::vector<double> out(n);
  switch (kind) {
    case Binary::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = pa[i % na] + pb[i % nb];
      break;
    case Binary::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = pa[i % na] - pb[i % nb];
      break;
    case Binary::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = pa[i % na] * pb[i % nb];
      break;
  }
  Tensor result(big.shape(), std::move(out));
  if (Tape* tape = recording_tape({&a, &b})) {
    ImplPtr ia = a.handle(), ib = b.handle(), io = result.handle();
    tape->record(result, [ia, ib, io, kind, n] {
      const double* g = io->grad.data();
      const std::size_t na = ia->data.size(), nb = ib->data.size();
      if (wants_grad(*ia)) {
        double* ga = ia->grad_buffer();
        if (kind == Binary::mul) {
          for (std::size_t i = 0; i < n; ++i) ga[i % na] += g[i] * ib->data[i % nb];
        } else {
          for (std::size_t i = 0; i < n; ++i) ga[i % na] += g[i];
        }
      }
      if (wants_grad(*ib)) {
        double* gb = ib->grad_buffer();
        if (kind == Binary::mul) {
          for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * ia->data[i % na];
        } else if (kind == Binary::sub) {
          for (std::size_t i = 0; i < n; ++i) gb[i % nb] -= g[i];
        } else {
          for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i];
        }
      }
    });
  }
  return result;
}

// Elementwise unary op with derivative computed from (input, output).
template <class F, class D>
Tensor unary(const Tensor& x, F f, D df) {
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  Tensor result(x.shape(), std::move(out));
  if (Tape* tape = recording_tape({&x})) {
    ImplPtr ix = x.handle(), io = result.handle();
    tape->record(result, [ix, io, df] {
      double* gx = ix->grad_buffer();
      for (std::size_t i = 0; i < io->data.size(); ++i) {
        gx[i] += io->grad[i] * df(ix->data[i], io->data[i]);
      }
    });
  }
  return result;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

std::uint64_t to_le64(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap64(v);
  return v;
}

std::uint32_t to_le32(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) v = __builtin_bswap32(v);
  return v;
}

constexpr char kMagic[8] = {'B', 'I', 'A', 'C', 'T', 'C', 'K', 'P'};

}  // namespace

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& s) { return span_numel(s, 0, s.size()); }

double* detail::TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad.data();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : p_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("Tensor: shape " + shape_str(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  p_->shape = std::move(shape);
  p_->data = std::move(data);
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), value));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
  Tensor t(std::move(shape), std::move(data));
  t.p_->requires_grad = true;
  return t;
}

std::size_t Tensor::dim(int i) const { return p_->shape[norm_axis(i, rank(), "dim")]; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_str(shape()));
  return p_->data[0];
}

std::optional<std::int64_t> Tensor::node_id() const {
  if (p_->node < 0) return std::nullopt;
  return p_->node;
}

std::int64_t Tape::record(const Tensor& out, Backward backward) {
  if (consumed_) throw std::logic_error("Tape: recording onto a consumed tape; call clear()");
  const auto id = static_cast<std::int64_t>(nodes_.size());
  out.impl().node = id;
  out.impl().tape = this;
  nodes_.push_back({out.handle(), std::move(backward)});
  return id;
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::logic_error("backward: tape already consumed; run a new forward pass");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (loss.impl().node < 0 || loss.impl().tape != this) {
    throw std::logic_error("backward: loss was not recorded on this tape");
  }
  consumed_ = true;
  loss.impl().grad_buffer()[0] += 1.0;
  for (auto i = loss.impl().node; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.out->grad.empty()) n.backward();
  }
}

void Tape::clear() {
  for (Node& n : nodes_) {
    n.out->node = -1;
    n.out->tape = nullptr;
  }
  nodes_.clear();
  consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }
NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }
Tape* active_tape() { return g_active_tape; }

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::mul, "mul"); }

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x,
      [](double v) { return 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v))); },
      [](double v, double) {
        const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
        return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
      });
}

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  if (a.rank() < 2 || b.rank() < 2) shape_mismatch("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(-2), k = a.dim(-1);
  const std::size_t bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::size_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (bk != k) shape_mismatch("matmul", a.shape(), b.shape());
  const bool shared = b.rank() == 2;
  std::size_t groups = 1;
  if (!shared) {
    if (b.rank() != a.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      shape_mismatch("matmul", a.shape(), b.shape());
    }
    groups = span_numel(a.shape(), 0, a.rank() - 2);
  }
  // With a shared b the leading dims of a fold into the row count.
  const std::size_t rows = shared ? a.numel() / k : m;
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<double> out(shape_numel(out_shape));
  for (std::size_t g = 0; g < groups; ++g) {
    CMapM A(a.data().data() + g * rows * k, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(k));
    MapM C(out.data() + g * rows * n, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
    const double* pb = b.data().data() + g * k * n;
    if (transpose_b) {
      C.noalias() = A * CMapM(pb, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k)).transpose();
    } else {
      C.noalias() = A * CMapM(pb, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    }
  }
  Tensor result(std::move(out_shape), std::move(out));
  if (Tape* tape = recording_tape({&a, &b})) {
    ImplPtr ia = a.handle(), ib = b.handle(), io = result.handle();
    tape->record(result, [ia, ib, io, groups, rows, k, n, transpose_b] {
      const auto R = static_cast<Eigen::Index>(rows), K = static_cast<Eigen::Index>(k),
                 N = static_cast<Eigen::Index>(n);
      const bool ga_on = wants_grad(*ia), gb_on = wants_grad(*ib);
      double* ga = ga_on ? ia->grad_buffer() : nullptr;
      double* gb = gb_on ? ib->grad_buffer() : nullptr;
      for (std::size_t g = 0; g < groups; ++g) {
        CMapM dC(io->grad.data() + g * rows * n, R, N);
        CMapM A(ia->data.data() + g * rows * k, R, K);
        const double* pb = ib->data.data() + g * k * n;
        if (transpose_b) {
          CMapM B(pb, N, K);  // stored [n, k]
          if (ga_on) MapM(ga + g * rows * k, R, K).noalias() += dC * B;
          if (gb_on) MapM(gb + g * k * n, N, K).noalias() += dC.transpose() * A;
        } else {
          CMapM B(pb, K, N);
          if (ga_on) MapM(ga + g * rows * k, R, K).noalias() += dC * B.transpose();
          if (gb_on) MapM(gb + g * k * n, K, N).noalias() += A.transpose() * dC;
        }
      }
    });
  }
  return result;
}

Tensor softmax(const Tensor& x) {
  if (x.rank() == 0) throw ShapeError("softmax: scalar input");
  const std::size_t n = x.dim(-1), rows = x.numel() / std::max<std::size_t>(n, 1);
  std::vector<double> out(x.numel());
  const double* in = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in + r * n;
    double* yr = out.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += (yr[i] = std::exp(xr[i] - mx));
    for (std::size_t i = 0; i < n; ++i) yr[i] /= z;
  }
  Tensor result(x.shape(), std::move(out));
  if (Tape* tape = recording_tape({&x})) {
    ImplPtr ix = x.handle(), io = result.handle();
    tape->record(result, [ix, io, rows, n] {
      double* gx = ix->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = io->data.data() + r * n;
        const double* gy = io->grad.data() + r * n;
        double dot = 0.0;
        for (std::size_t i = 0; i < n; ++i) dot += gy[i] * y[i];
        for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += y[i] * (gy[i] - dot);
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.rank() == 0 || gamma.shape() != Shape{x.dim(-1)} || beta.shape() != gamma.shape()) {
    shape_mismatch("layer_norm", x.shape(), gamma.shape());
  }
  const std::size_t n = x.dim(-1), rows = x.numel() / n;
  std::vector<double> out(x.numel()), xhat(x.numel()), inv(rows);
  std::vector<char> floored(rows);
  const double* in = x.data().data();
  const double* gm = gamma.data().data();
  const double* bt = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in + r * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += xr[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(n);
    floored[r] = var < kLayerNormVarianceFloor;
    inv[r] = 1.0 / std::sqrt(std::max(var, kLayerNormVarianceFloor));
    for (std::size_t i = 0; i < n; ++i) {
      xhat[r * n + i] = (xr[i] - mu) * inv[r];
      out[r * n + i] = xhat[r * n + i] * gm[i] + bt[i];
    }
  }
  Tensor result(x.shape(), std::move(out));
  if (Tape* tape = recording_tape({&x, &gamma, &beta})) {
    ImplPtr ix = x.handle(), ig = gamma.handle(), ibt = beta.handle(), io = result.handle();
    tape->record(result, [ix, ig, ibt, io, rows, n, xhat = std::move(xhat), inv = std::move(inv),
                          floored = std::move(floored)] {
      const double* gy = io->grad.data();
      if (wants_grad(*ig)) {
        double* gg = ig->grad_buffer();
        for (std::size_t j = 0; j < rows * n; ++j) gg[j % n] += gy[j] * xhat[j];
      }
      if (wants_grad(*ibt)) {
        double* gb = ibt->grad_buffer();
        for (std::size_t j = 0; j < rows * n; ++j) gb[j % n] += gy[j];
      }
      if (!wants_grad(*ix)) return;
      double* gx = ix->grad_buffer();
      const double* gm = ig->data.data();
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = gy[r * n + i] * gm[i];
          m1 += d;
          m2 += d * xhat[r * n + i];
        }
        m1 *= inv_n;
        m2 *= inv_n;
        // Below the floor the variance is a constant and drops out.
        if (floored[r]) m2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = gy[r * n + i] * gm[i];
          gx[r * n + i] += inv[r] * (d - m1 - xhat[r * n + i] * m2);
        }
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_mismatch("reshape", x.shape(), shape);
  Tensor result(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (Tape* tape = recording_tape({&x})) {
    ImplPtr ix = x.handle(), io = result.handle();
    tape->record(result, [ix, io] {
      double* gx = ix->grad_buffer();
      for (std::size_t i = 0; i < io->grad.size(); ++i) gx[i] += io->grad[i];
    });
  }
  return result;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose: expected 2-D, got " + shape_str(x.shape()));
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x.data()[i * c + j];
  }
  Tensor result({c, r}, std::move(out));
  if (Tape* tape = recording_tape({&x})) {
    ImplPtr ix = x.handle(), io = result.handle();
    tape->record(result, [ix, io, r, c] {
      double* gx = ix->grad_buffer();
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += io->grad[j * r + i];
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = norm_axis(axis, x.rank(), "slice");
  const std::size_t full = x.shape()[ax];
  if (start > full || length > full - start) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range for " + shape_str(x.shape()) + " axis " + std::to_string(ax));
  }
  const std::size_t outer = span_numel(x.shape(), 0, ax);
  const std::size_t inner = span_numel(x.shape(), ax + 1, x.rank());
  Shape shape = x.shape();
  shape[ax] = length;
  std::vector<double> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + (o * full + start) * inner, length * inner,
                out.data() + o * length * inner);
  }
  Tensor result(std::move(shape), std::move(out));
  if (Tape* tape = recording_tape({&x})) {
    ImplPtr ix = x.handle(), io = result.handle();
    tape->record(result, [ix, io, outer, full, start, length, inner] {
      double* gx = ix->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        const double* src = io->grad.data() + o * length * inner;
        double* dst = gx + (o * full + start) * inner;
        for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return result;
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts[0].shape();
  const std::size_t ax = norm_axis(axis, ref.size(), "concat");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    Shape a = p.shape(), b = ref;
    if (a.size() != b.size()) shape_mismatch("concat", ref, p.shape());
    a[ax] = b[ax] = 0;
    if (a != b) shape_mismatch("concat", ref, p.shape());
    total += p.shape()[ax];
  }
  const std::size_t outer = span_numel(ref, 0, ax);
  const std::size_t inner = span_numel(ref, ax + 1, ref.size());
  Shape shape = ref;
  shape[ax] = total;
  std::vector<double> out(outer * total * inner);
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t len = p.shape()[ax];
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * len * inner, len * inner,
                  out.data() + (o * total + offset) * inner);
    }
    offset += len;
  }
  Tensor result(std::move(shape), std::move(out));
  bool any = false;
  Tape* tape = g_active_tape;
  if (tape) {
    for (const Tensor& p : parts) any = any || live(p.impl(), tape);
  }
  if (any) {
    std::vector<ImplPtr> ins;
    for (const Tensor& p : parts) ins.push_back(p.handle());
    ImplPtr io = result.handle();
    tape->record(result, [ins, io, ax, outer, total, inner] {
      std::size_t offset = 0;
      for (const ImplPtr& ip : ins) {
        const std::size_t len = ip->shape[ax];
        if (wants_grad(*ip)) {
          double* g = ip->grad_buffer();
          for (std::size_t o = 0; o < outer; ++o) {
            const double* src = io->grad.data() + (o * total + offset) * inner;
            for (std::size_t i = 0; i < len * inner; ++i) g[o * len * inner + i] += src[i];
          }
        }
        offset += len;
      }
    });
  }
  return result;
}

namespace {

Tensor reduce_axis(const Tensor& x, int axis, bool average) {
  const std::size_t ax = norm_axis(axis, x.rank(), average ? "mean" : "sum");
  const std::size_t outer = span_numel(x.shape(), 0, ax);
  const std::size_t len = x.shape()[ax];
  const std::size_t inner = span_numel(x.shape(), ax + 1, x.rank());
  const double w = average ? 1.0 / static_cast<double>(std::max<std::size_t>(len, 1)) : 1.0;
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(ax));
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const double* src = x.data().data() + (o * len + l) * inner;
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += src[i];
    }
  }
  for (double& v : out) v *= w;
  Tensor result(std::move(shape), std::move(out));
  if (Tape* tape = recording_tape({&x})) {
    ImplPtr ix = x.handle(), io = result.handle();
    tape->record(result, [ix, io, outer, len, inner, w] {
      double* gx = ix->grad_buffer();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t l = 0; l < len; ++l) {
          for (std::size_t i = 0; i < inner; ++i) {
            gx[(o * len + l) * inner + i] += w * io->grad[o * inner + i];
          }
        }
      }
    });
  }
  return result;
}

Tensor reduce_all(const Tensor& x, bool average) {
  const double w = average ? 1.0 / static_cast<double>(std::max<std::size_t>(x.numel(), 1)) : 1.0;
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor result = Tensor::scalar(s * w);
  if (Tape* tape = recording_tape({&x})) {
    ImplPtr ix = x.handle(), io = result.handle();
    tape->record(result, [ix, io, w] {
      double* gx = ix->grad_buffer();
      const double g = io->grad[0] * w;
      for (std::size_t i = 0; i < ix->data.size(); ++i) gx[i] += g;
    });
  }
  return result;
}

// Maps between [B, T, H*d] and [B*H, T, d]; `forward` picks the direction.
Tensor permute_heads(const Tensor& x, std::size_t heads, bool split) {
  const char* name = split ? "split_heads" : "merge_heads";
  if (x.rank() != 3 || heads == 0) throw ShapeError(std::string(name) + ": bad input " + shape_str(x.shape()));
  std::size_t B, T, d;
  if (split) {
    if (x.dim(2) % heads != 0) throw ShapeError(std::string(name) + ": width not divisible by heads");
    B = x.dim(0), T = x.dim(1), d = x.dim(2) / heads;
  } else {
    if (x.dim(0) % heads != 0) throw ShapeError(std::string(name) + ": batch not divisible by heads");
    B = x.dim(0) / heads, T = x.dim(1), d = x.dim(2);
  }
  const std::size_t H = heads;
  // Index in [B, T, H*d] layout of element (b, h, t, j), and in [B*H, T, d].
  auto wide = [=](std::size_t b, std::size_t h, std::size_t t, std::size_t j) {
    return (b * T + t) * H * d + h * d + j;
  };
  auto tall = [=](std::size_t b, std::size_t h, std::size_t t, std::size_t j) {
    return ((b * H + h) * T + t) * d + j;
  };
  std::vector<double> out(x.numel());
  const double* in = x.data().data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t j = 0; j < d; ++j) {
          if (split) out[tall(b, h, t, j)] = in[wide(b, h, t, j)];
          else out[wide(b, h, t, j)] = in[tall(b, h, t, j)];
        }
  Shape shape = split ? Shape{B * H, T, d} : Shape{B, T, H * d};
  Tensor result(std::move(shape), std::move(out));
  if (Tape* tape = recording_tape({&x})) {
    ImplPtr ix = x.handle(), io = result.handle();
    tape->record(result, [ix, io, B, H, T, d, split, wide, tall] {
      double* gx = ix->grad_buffer();
      const double* g = io->grad.data();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t t = 0; t < T; ++t)
            for (std::size_t j = 0; j < d; ++j) {
              if (split) gx[wide(b, h, t, j)] += g[tall(b, h, t, j)];
              else gx[tall(b, h, t, j)] += g[wide(b, h, t, j)];
            }
    });
  }
  return result;
}

}  // namespace

Tensor sum(const Tensor& x, int axis) { return reduce_axis(x, axis, false); }
Tensor mean(const Tensor& x, int axis) { return reduce_axis(x, axis, true); }
Tensor sum(const Tensor& x) { return reduce_all(x, false); }
Tensor mean(const Tensor& x) { return reduce_all(x, true); }

Tensor split_heads(const Tensor& x, std::size_t heads) { return permute_heads(x, heads, true); }
Tensor merge_heads(const Tensor& x, std::size_t heads) { return permute_heads(x, heads, false); }

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (p == 0.0) return x;
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> m(x.numel());
  for (double& v : m) v = keep(rng) ? 1.0 / (1.0 - p) : 0.0;
  return mul(x, Tensor(x.shape(), std::move(m)));
}

Tensor l1_loss(const Tensor& pred, const Tensor& target, const Tensor& mask) {
  if (pred.shape() != target.shape()) shape_mismatch("l1_loss", pred.shape(), target.shape());
  if (pred.shape() != mask.shape()) shape_mismatch("l1_loss", pred.shape(), mask.shape());
  const std::size_t n = pred.numel();
  std::size_t count = 0;
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask.data()[i] != 0.0) {
      ++count;
      s += std::abs(pred.data()[i] - target.data()[i]);
    }
  }
  if (count == 0) throw std::invalid_argument("l1_loss: every entry is masked out");
  const double w = 1.0 / static_cast<double>(count);
  Tensor result = Tensor::scalar(s * w);
  if (Tape* tape = recording_tape({&pred, &target})) {
    ImplPtr ip = pred.handle(), it = target.handle(), im = mask.handle(), io = result.handle();
    tape->record(result, [ip, it, im, io, n, w] {
      const double g = io->grad[0] * w;
      double* gp = wants_grad(*ip) ? ip->grad_buffer() : nullptr;
      double* gt = wants_grad(*it) ? it->grad_buffer() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        if (im->data[i] == 0.0) continue;
        const double d = ip->data[i] - it->data[i];
        const double sg = d > 0.0 ? g : (d < 0.0 ? -g : 0.0);
        if (gp) gp[i] += sg;
        if (gt) gt[i] -= sg;
      }
    });
  }
  return result;
}

Tensor gaussian_kl(const Tensor& mu, const Tensor& logvar) {
  if (mu.shape() != logvar.shape() || mu.rank() == 0) {
    shape_mismatch("gaussian_kl", mu.shape(), logvar.shape());
  }
  const std::size_t z = mu.dim(-1), batch = mu.numel() / z;
  const double w = 1.0 / static_cast<double>(batch);
  double s = 0.0;
  for (std::size_t i = 0; i < mu.numel(); ++i) {
    const double m = mu.data()[i], lv = logvar.data()[i];
    s += -0.5 * (1.0 + lv - m * m - std::exp(lv));
  }
  Tensor result = Tensor::scalar(s * w);
  if (Tape* tape = recording_tape({&mu, &logvar})) {
    ImplPtr im = mu.handle(), il = logvar.handle(), io = result.handle();
    tape->record(result, [im, il, io, w] {
      const double g = io->grad[0] * w;
      if (wants_grad(*im)) {
        double* gm = im->grad_buffer();
        for (std::size_t i = 0; i < im->data.size(); ++i) gm[i] += g * im->data[i];
      }
      if (wants_grad(*il)) {
        double* gl = il->grad_buffer();
        for (std::size_t i = 0; i < il->data.size(); ++i) {
          gl[i] += g * 0.5 * (std::exp(il->data[i]) - 1.0);
        }
      }
    });
  }
  return result;
}

void adam_step(std::span<double> params, std::span<const double> grads, std::span<double> m,
               std::span<double> v, const AdamConfig& cfg, std::int64_t t) {
  if (grads.size() != params.size() || m.size() != params.size() || v.size() != params.size()) {
    throw ShapeError("adam_step: params, grads and moments differ in length");
  }
  if (t < 1) throw std::invalid_argument("adam_step: t must be >= 1");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grads[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double mh = m[i] / c1, vh = v[i] / c2;
    params[i] -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
  }
}

Adam::Adam(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const Tensor& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  ++t_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    std::vector<double> g(p.grad().begin(), p.grad().end());
    if (g.empty()) g.assign(p.numel(), 0.0);
    adam_step(p.data(), g, m_[i], v_[i], cfg_, t_);
    p.zero_grad();
  }
}

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file) {
  nlohmann::json header;
  header["extra"] = file.extra;
  header["tensors"] = nlohmann::json::array();
  for (const NamedTensor& nt : file.tensors) {
    header["tensors"].push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}});
  }
  const std::string text = header.dump();
  std::string bytes(kMagic, sizeof(kMagic));
  auto put32 = [&](std::uint32_t v) {
    v = to_le32(v);
    bytes.append(reinterpret_cast<const char*>(&v), 4);
  };
  put32(kCheckpointVersion);
  put32(static_cast<std::uint32_t>(text.size()));
  bytes += text;
  for (const NamedTensor& nt : file.tensors) {
    for (double d : nt.tensor.data()) {
      const std::uint64_t v = to_le64(std::bit_cast<std::uint64_t>(d));
      bytes.append(reinterpret_cast<const char*>(&v), 8);
    }
  }
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot create " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointFile read_checkpoint_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw CheckpointError(path.string() + ": not a checkpoint file");
  }
  auto get32 = [&](std::size_t off) {
    std::uint32_t v;
    std::memcpy(&v, bytes.data() + off, 4);
    return to_le32(v);
  };
  const std::uint32_t version = get32(8);
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": checkpoint version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  }
  const std::size_t hlen = get32(12);
  if (bytes.size() < 16 + hlen) throw CheckpointError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": bad header: " + e.what());
  }
  CheckpointFile file;
  file.extra = header.value("extra", nlohmann::json::object());
  std::size_t off = 16 + hlen;
  for (const auto& t : header.at("tensors")) {
    Shape shape = t.at("shape").get<Shape>();
    const std::size_t n = shape_numel(shape);
    if (bytes.size() < off + 8 * n) {
      throw CheckpointError(path.string() + ": payload truncated at tensor " +
                            t.at("name").get<std::string>());
    }
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t v;
      std::memcpy(&v, bytes.data() + off + 8 * i, 8);
      data[i] = std::bit_cast<double>(to_le64(v));
    }
    off += 8 * n;
    file.tensors.push_back({t.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data))});
  }
  if (off != bytes.size()) {
    throw CheckpointError(path.string() + ": " + std::to_string(bytes.size() - off) +
                          " trailing bytes after payload");
  }
  return file;
}

}  // namespace biact
