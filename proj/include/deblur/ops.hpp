#pragma once

// Differentiable operations over Tensor. Image tensors use N x C x H x W.
// Every op checks its output for non-finite values and, when a tape is
// active and any input requires a gradient, records its backward rule.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "deblur/error.hpp"
#include "deblur/fft.hpp"
#include "deblur/parallel.hpp"
#include "deblur/tensor.hpp"

namespace deblur {

namespace detail {

enum class Broadcast { kSame, kChannel };

template <class T>
Broadcast broadcast_kind(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (a.rank() >= 2 && b.numel() == a.dim(1)) {
    // b must be (C) or (1, C, 1, ...) of matching rank
    bool channel_vector = b.rank() == 1;
    if (!channel_vector && b.rank() == a.rank()) {
      channel_vector = true;
      for (std::size_t i = 0; i < b.rank(); ++i) {
        if (i != 1 && b.dim(i) != 1) channel_vector = false;
      }
    }
    if (channel_vector) return Broadcast::kChannel;
  }
  throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                   " are neither equal nor channel-broadcastable");
}

// Product of extents after the channel axis.
template <class T>
std::size_t inner_size(const Tensor<T>& a) {
  std::size_t inner = 1;
  for (std::size_t i = 2; i < a.rank(); ++i) inner *= a.dim(i);
  return inner;
}

template <class T>
void require_rank4(const Tensor<T>& x, const char* op) {
  if (x.rank() != 4) throw ShapeError(std::string(op) + ": expected N x C x H x W, got " + shape_str(x.shape()));
}

inline constexpr std::size_t kLanes = 8;

// Fixed-lane reductions: the summation order depends only on n, so results
// are reproducible while still letting the compiler vectorize.
template <class T>
T dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  T lane[kLanes] = {};
  std::size_t p = 0;
  for (; p + kLanes <= n; p += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) lane[j] += a[p + j] * b[p + j];
  T acc = T(0);
  for (; p < n; ++p) acc += a[p] * b[p];
  for (std::size_t j = 0; j < kLanes; ++j) acc += lane[j];
  return acc;
}

template <class T>
T sum_n(const T* __restrict a, std::size_t n) {
  T lane[kLanes] = {};
  std::size_t p = 0;
  for (; p + kLanes <= n; p += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) lane[j] += a[p + j];
  T acc = T(0);
  for (; p < n; ++p) acc += a[p];
  for (std::size_t j = 0; j < kLanes; ++j) acc += lane[j];
  return acc;
}

template <class T>
void axpy(T* __restrict dst, const T* __restrict src, std::size_t n, T w) {
  for (std::size_t p = 0; p < n; ++p) dst[p] += w * src[p];
}

// dst[k] += sum_j w[k * wk + j * wj] * src[j] for k < m (m <= 4), planes of
// length `plane`. Output planes are updated together so each source plane is
// read once.
template <class T>
void pw_accumulate(T* dst, std::size_t m, const T* src, std::size_t nsrc, std::size_t plane, const T* w,
                   std::size_t wk, std::size_t wj) {
  T* __restrict d0 = dst;
  T* __restrict d1 = dst + (m > 1 ? plane : 0);
  T* __restrict d2 = dst + (m > 2 ? 2 * plane : 0);
  T* __restrict d3 = dst + (m > 3 ? 3 * plane : 0);
  if (m < 4) {
    for (std::size_t k = 0; k < m; ++k)
      for (std::size_t j = 0; j < nsrc; ++j) axpy(dst + k * plane, src + j * plane, plane, w[k * wk + j * wj]);
    return;
  }
  for (std::size_t j = 0; j < nsrc; ++j) {
    const T* __restrict s = src + j * plane;
    const T w0 = w[j * wj], w1 = w[wk + j * wj], w2 = w[2 * wk + j * wj], w3 = w[3 * wk + j * wj];
    for (std::size_t p = 0; p < plane; ++p) {
      const T v = s[p];
      d0[p] += w0 * v;
      d1[p] += w1 * v;
      d2[p] += w2 * v;
      d3[p] += w3 * v;
    }
  }
}

// Planes copied into a zero border of one pixel, row stride width + 2, plus
// two slack elements. In this layout a 3x3 tap is a constant offset, so a
// whole plane is handled with one flat loop; the two extra columns per row
// are scratch.
template <class T>
struct PaddedPlanes {
  std::size_t height = 0, width = 0, stride = 0, size = 0;
  std::vector<T> data;

  PaddedPlanes(const T* src, std::size_t count, std::size_t h, std::size_t w)
      : height(h), width(w), stride(w + 2), size((h + 2) * (w + 2) + 2), data(count * size, T(0)) {
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t y = 0; y < h; ++y)
        std::copy_n(src + (i * h + y) * w, w, data.data() + i * size + (y + 1) * stride + 1);
  }

  const T* plane(std::size_t i) const { return data.data() + i * size; }
  // Element (y, x) of plane i sits at interior(i)[y * stride + x].
  const T* interior(std::size_t i) const { return plane(i) + stride + 1; }
  std::size_t flat() const { return height * stride; }
  std::size_t tap(int ky, int kx) const { return static_cast<std::size_t>(ky) * stride + static_cast<std::size_t>(kx); }
};

// Adds the valid columns of a stride-padded buffer into a dense plane.
template <class T>
void add_unpadded(T* dst, const T* buf, std::size_t height, std::size_t width, std::size_t stride) {
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) dst[y * width + x] += buf[y * stride + x];
  }
}

template <class T, class Fn>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, Fn&& fn) {
  const Broadcast kind = broadcast_kind(a, b, op);
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto av = a.data();
  auto bv = b.data();
  if (kind == Broadcast::kSame) {
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = fn(av[i], bv[i]);
  } else {
    const std::size_t channels = a.dim(1), inner = inner_size(a);
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = fn(av[i], bv[(i / inner) % channels]);
  }
  check_finite(out, op);
  return out;
}

// Reduces an a-shaped gradient into b's gradient under the given broadcast.
template <class T, class Fn>
void reduce_into(const Tensor<T>& b, Broadcast kind, std::size_t channels, std::size_t inner, std::size_t n,
                 Fn&& term) {
  auto gb = b.grad_mut();
  if (kind == Broadcast::kSame) {
    for (std::size_t i = 0; i < n; ++i) gb[i] += term(i);
  } else {
    for (std::size_t i = 0; i < n; ++i) gb[(i / inner) % channels] += term(i);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. `b` may equal `a` in shape or be a per-channel
// vector broadcast over every other axis.

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary(a, b, "add", [](T x, T y) { return x + y; });
  if (auto* tape = detail::recording_tape(a, b)) {
    const auto kind = detail::broadcast_kind(a, b, "add");
    const std::size_t channels = a.rank() >= 2 ? a.dim(1) : 1, inner = detail::inner_size(a);
    tape->record(out, [a, b, out, kind, channels, inner]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) detail::reduce_into(b, kind, channels, inner, g.size(), [&](std::size_t i) { return g[i]; });
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary(a, b, "sub", [](T x, T y) { return x - y; });
  if (auto* tape = detail::recording_tape(a, b)) {
    const auto kind = detail::broadcast_kind(a, b, "sub");
    const std::size_t channels = a.rank() >= 2 ? a.dim(1) : 1, inner = detail::inner_size(a);
    tape->record(out, [a, b, out, kind, channels, inner]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) detail::reduce_into(b, kind, channels, inner, g.size(), [&](std::size_t i) { return -g[i]; });
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out = detail::binary(a, b, "mul", [](T x, T y) { return x * y; });
  if (auto* tape = detail::recording_tape(a, b)) {
    const auto kind = detail::broadcast_kind(a, b, "mul");
    const std::size_t channels = a.rank() >= 2 ? a.dim(1) : 1, inner = detail::inner_size(a);
    tape->record(out, [a, b, out, kind, channels, inner]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto av = a.data();
      auto bv = b.data();
      auto b_at = [&](std::size_t i) { return kind == detail::Broadcast::kSame ? bv[i] : bv[(i / inner) % channels]; };
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b_at(i);
      }
      if (b.requires_grad()) {
        detail::reduce_into(b, kind, channels, inner, g.size(), [&](std::size_t i) { return g[i] * av[i]; });
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * s;
  detail::check_finite(out, "scale");
  if (auto* tape = detail::recording_tape(a)) {
    tape->record(out, [a, out, s]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, T s) {
  return scale(a, s);
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto av = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = std::abs(av[i]);
  detail::check_finite(out, "abs");
  if (auto* tape = detail::recording_tape(a)) {
    tape->record(out, [a, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto av = a.data();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) {
        // subgradient 0 at ties
        if (av[i] > T(0)) ga[i] += g[i];
        else if (av[i] < T(0)) ga[i] -= g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  detail::check_finite(out, "sum");
  if (auto* tape = detail::recording_tape(a)) {
    tape->record(out, [a, out]() mutable {
      if (!out.has_grad()) return;
      const T g = out.grad()[0];
      for (T& v : a.grad_mut()) v += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Shape manipulation.

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape));
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  if (auto* tape = detail::recording_tape(a)) {
    tape->record(out, [a, out]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  }
  return out;
}

// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  Shape shape = a.shape();
  const std::size_t rows = shape[shape.size() - 2], cols = shape.back();
  std::swap(shape[shape.size() - 2], shape.back());
  Tensor<T> out(shape);
  const std::size_t batch = a.numel() / (rows * cols);
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t off = b * rows * cols;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) dst[off + c * rows + r] = src[off + r * cols + c];
  }
  if (auto* tape = detail::recording_tape(a)) {
    tape->record(out, [a, out, rows, cols, batch]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.grad_mut();
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t off = b * rows * cols;
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) ga[off + r * cols + c] += g[off + c * rows + r];
      }
    });
  }
  return out;
}

// Channels [begin, begin + count) of an N x C x ... tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& a, std::size_t begin, std::size_t count) {
  if (a.rank() < 2 || count == 0 || begin + count > a.dim(1)) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + shape_str(a.shape()));
  }
  Shape shape = a.shape();
  shape[1] = count;
  Tensor<T> out(shape);
  const std::size_t batch = a.dim(0), channels = a.dim(1), inner = detail::inner_size(a);
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(src.begin() + (n * channels + begin) * inner, count * inner, dst.begin() + n * count * inner);
  }
  if (auto* tape = detail::recording_tape(a)) {
    tape->record(out, [a, out, batch, channels, inner, begin, count]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto ga = a.grad_mut();
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t i = 0; i < count * inner; ++i) ga[(n * channels + begin) * inner + i] += g[n * count * inner + i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank() || a.dim(0) != b.dim(0) || detail::inner_size(a) != detail::inner_size(b)) {
    throw ShapeError("concat_channels: incompatible " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  for (std::size_t i = 2; i < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) throw ShapeError("concat_channels: spatial extents differ");
  }
  Shape shape = a.shape();
  shape[1] = a.dim(1) + b.dim(1);
  Tensor<T> out(shape);
  const std::size_t batch = a.dim(0), ca = a.dim(1), cb = b.dim(1), inner = detail::inner_size(a);
  auto dst = out.data();
  for (std::size_t n = 0; n < batch; ++n) {
    std::copy_n(a.data().begin() + n * ca * inner, ca * inner, dst.begin() + n * (ca + cb) * inner);
    std::copy_n(b.data().begin() + n * cb * inner, cb * inner, dst.begin() + (n * (ca + cb) + ca) * inner);
  }
  if (auto* tape = detail::recording_tape(a, b)) {
    tape->record(out, [a, b, out, batch, ca, cb, inner]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      for (std::size_t n = 0; n < batch; ++n) {
        const std::size_t base = n * (ca + cb) * inner;
        if (a.requires_grad()) {
          auto ga = a.grad_mut();
          for (std::size_t i = 0; i < ca * inner; ++i) ga[n * ca * inner + i] += g[base + i];
        }
        if (b.requires_grad()) {
          auto gb = b.grad_mut();
          for (std::size_t i = 0; i < cb * inner; ++i) gb[n * cb * inner + i] += g[base + ca * inner + i];
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra and convolutions.

// (..., M, K) x (..., K, N) -> (..., M, N); leading axes must match.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank()) {
    throw ShapeError("matmul: ranks differ or < 2: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i) {
    if (a.dim(i) != b.dim(i)) throw ShapeError("matmul: batch axes differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(r - 2), k = a.dim(r - 1), n = b.dim(r - 1);
  if (b.dim(r - 2) != k) {
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Shape shape = a.shape();
  shape[r - 1] = n;
  Tensor<T> out(shape);
  const std::size_t batch = a.numel() / (m * k);
  {
    auto av = a.data();
    auto bv = b.data();
    auto o = out.data();
    parallel_for(batch * m, [&](std::size_t bi) {
      const std::size_t bt = bi / m, i = bi % m;
      const T* arow = av.data() + bt * m * k + i * k;
      const T* bmat = bv.data() + bt * k * n;
      T* orow = o.data() + bt * m * n + i * n;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T aik = arow[kk];
        const T* brow = bmat + kk * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
      }
    });
  }
  detail::check_finite(out, "matmul");
  if (auto* tape = detail::recording_tape(a, b)) {
    tape->record(out, [a, b, out, batch, m, k, n]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto av = a.data();
      auto bv = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad_mut();
        // dA = dOut * B^T
        parallel_for(batch * m, [&](std::size_t bi) {
          const std::size_t bt = bi / m, i = bi % m;
          const T* grow = g.data() + bt * m * n + i * n;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const T* brow = bv.data() + bt * k * n + kk * n;
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[bt * m * k + i * k + kk] += acc;
          }
        });
      }
      if (b.requires_grad()) {
        auto gb = b.grad_mut();
        // dB = A^T * dOut
        parallel_for(batch * k, [&](std::size_t bk) {
          const std::size_t bt = bk / k, kk = bk % k;
          T* gbrow = gb.data() + bt * k * n + kk * n;
          for (std::size_t i = 0; i < m; ++i) {
            const T aik = av[bt * m * k + i * k + kk];
            const T* grow = g.data() + bt * m * n + i * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
          }
        });
      }
    });
  }
  return out;
}

// 1x1 convolution: weight (Cout, C), optional bias (Cout).
template <class T>
Tensor<T> conv_pw(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require_rank4(x, "conv_pw");
  if (weight.rank() != 2 || weight.dim(1) != x.dim(1)) {
    throw ShapeError("conv_pw: weight " + shape_str(weight.shape()) + " does not match input " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), cin = x.dim(1), cout = weight.dim(0), plane = x.dim(2) * x.dim(3);
  if (bias.defined() && bias.numel() != cout) throw ShapeError("conv_pw: bias size mismatch");
  Tensor<T> out(Shape{batch, cout, x.dim(2), x.dim(3)});
  {
    auto xv = x.data();
    auto wv = weight.data();
    auto o = out.data();
    const std::size_t groups = (cout + 3) / 4;
    parallel_for(batch * groups, [&](std::size_t idx) {
      const std::size_t n = idx / groups, oc0 = (idx % groups) * 4;
      const std::size_t m = std::min<std::size_t>(4, cout - oc0);
      if (bias.defined()) {
        for (std::size_t k = 0; k < m; ++k) std::fill_n(o.data() + (n * cout + oc0 + k) * plane, plane, bias[oc0 + k]);
      }
      detail::pw_accumulate<T>(o.data() + (n * cout + oc0) * plane, m, xv.data() + n * cin * plane, cin, plane,
                               wv.data() + oc0 * cin, cin, 1);
    });
  }
  detail::check_finite(out, "conv_pw");
  if (auto* tape = detail::recording_tape(x, weight, bias)) {
    tape->record(out, [x, weight, bias, out, batch, cin, cout, plane]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto xv = x.data();
      auto wv = weight.data();
      if (x.requires_grad()) {
        auto gx = x.grad_mut();
        const std::size_t groups = (cin + 3) / 4;
        parallel_for(batch * groups, [&](std::size_t idx) {
          const std::size_t n = idx / groups, c0 = (idx % groups) * 4;
          const std::size_t m = std::min<std::size_t>(4, cin - c0);
          detail::pw_accumulate<T>(gx.data() + (n * cin + c0) * plane, m, g.data() + n * cout * plane, cout, plane,
                                   wv.data() + c0, 1, cin);
        });
      }
      if (weight.requires_grad()) {
        auto gw = weight.grad_mut();
        parallel_for(cout, [&](std::size_t oc) {
          for (std::size_t c = 0; c < cin; ++c) {
            T acc = T(0);
            for (std::size_t n = 0; n < batch; ++n) {
              acc += detail::dot(g.data() + (n * cout + oc) * plane, xv.data() + (n * cin + c) * plane, plane);
            }
            gw[oc * cin + c] += acc;
          }
        });
      }
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad_mut();
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t oc = 0; oc < cout; ++oc) {
            gb[oc] += detail::sum_n(g.data() + (n * cout + oc) * plane, plane);
          }
      }
    });
  }
  return out;
}

// 3x3 depth-wise convolution, stride 1, zero padding 1: weight (C, 3, 3).
template <class T>
Tensor<T> conv_dw(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require_rank4(x, "conv_dw");
  if (weight.rank() != 3 || weight.dim(1) != 3 || weight.dim(2) != 3) {
    throw ShapeError("conv_dw: kernel must be C x 3 x 3, got " + shape_str(weight.shape()));
  }
  if (weight.dim(0) != x.dim(1)) throw ShapeError("conv_dw: kernel count does not match channels");
  const std::size_t batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3), plane = height * width;
  if (bias.defined() && bias.numel() != channels) throw ShapeError("conv_dw: bias size mismatch");
  Tensor<T> out(x.shape());
  {
    auto wv = weight.data();
    auto o = out.data();
    const detail::PaddedPlanes<T> xp(x.data().data(), batch * channels, height, width);
    parallel_for(batch * channels, [&](std::size_t idx) {
      const std::size_t c = idx % channels;
      std::vector<T> buf(xp.flat(), T(0));
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx)
          detail::axpy(buf.data(), xp.plane(idx) + xp.tap(ky, kx), xp.flat(), wv[c * 9 + ky * 3 + kx]);
      T* dst = o.data() + idx * plane;
      if (bias.defined()) std::fill_n(dst, plane, bias[c]);
      detail::add_unpadded(dst, buf.data(), height, width, xp.stride);
    });
  }
  detail::check_finite(out, "conv_dw");
  if (auto* tape = detail::recording_tape(x, weight, bias)) {
    tape->record(out, [x, weight, bias, out, batch, channels, height, width, plane]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto wv = weight.data();
      const detail::PaddedPlanes<T> gp(g.data(), batch * channels, height, width);
      if (x.requires_grad()) {
        auto gx = x.grad_mut();
        parallel_for(batch * channels, [&](std::size_t idx) {
          const std::size_t c = idx % channels;
          std::vector<T> buf(gp.flat(), T(0));
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
              detail::axpy(buf.data(), gp.plane(idx) + gp.tap(2 - ky, 2 - kx), gp.flat(), wv[c * 9 + ky * 3 + kx]);
          detail::add_unpadded(gx.data() + idx * plane, buf.data(), height, width, gp.stride);
        });
      }
      if (weight.requires_grad()) {
        auto gw = weight.grad_mut();
        const detail::PaddedPlanes<T> xp(x.data().data(), batch * channels, height, width);
        parallel_for(channels, [&](std::size_t c) {
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              T acc = T(0);
              for (std::size_t n = 0; n < batch; ++n) {
                const std::size_t idx = n * channels + c;
                acc += detail::dot(gp.interior(idx), xp.plane(idx) + xp.tap(ky, kx), xp.flat());
              }
              gw[c * 9 + ky * 3 + kx] += acc;
            }
        });
      }
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad_mut();
        for (std::size_t idx = 0; idx < batch * channels; ++idx) {
          gb[idx % channels] += detail::sum_n(g.data() + idx * plane, plane);
        }
      }
    });
  }
  return out;
}

// Dense 3x3 convolution, stride 1, zero padding 1: weight (Cout, Cin, 3, 3).
template <class T>
Tensor<T> conv3x3(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
  detail::require_rank4(x, "conv3x3");
  if (weight.rank() != 4 || weight.dim(1) != x.dim(1) || weight.dim(2) != 3 || weight.dim(3) != 3) {
    throw ShapeError("conv3x3: weight " + shape_str(weight.shape()) + " does not match input " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), cin = x.dim(1), cout = weight.dim(0), height = x.dim(2), width = x.dim(3);
  const std::size_t plane = height * width;
  if (bias.defined() && bias.numel() != cout) throw ShapeError("conv3x3: bias size mismatch");
  Tensor<T> out(Shape{batch, cout, height, width});
  {
    auto wv = weight.data();
    auto o = out.data();
    const detail::PaddedPlanes<T> xp(x.data().data(), batch * cin, height, width);
    parallel_for(batch * cout, [&](std::size_t idx) {
      const std::size_t n = idx / cout, oc = idx % cout;
      std::vector<T> buf(xp.flat(), T(0));
      for (std::size_t c = 0; c < cin; ++c) {
        const T* src = xp.plane(n * cin + c);
        const T* k = wv.data() + (oc * cin + c) * 9;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) detail::axpy(buf.data(), src + xp.tap(ky, kx), xp.flat(), k[ky * 3 + kx]);
      }
      T* dst = o.data() + idx * plane;
      if (bias.defined()) std::fill_n(dst, plane, bias[oc]);
      detail::add_unpadded(dst, buf.data(), height, width, xp.stride);
    });
  }
  detail::check_finite(out, "conv3x3");
  if (auto* tape = detail::recording_tape(x, weight, bias)) {
    tape->record(out, [x, weight, bias, out, batch, cin, cout, height, width, plane]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto wv = weight.data();
      const detail::PaddedPlanes<T> gp(g.data(), batch * cout, height, width);
      if (x.requires_grad()) {
        auto gx = x.grad_mut();
        parallel_for(batch * cin, [&](std::size_t idx) {
          const std::size_t n = idx / cin, c = idx % cin;
          std::vector<T> buf(gp.flat(), T(0));
          for (std::size_t oc = 0; oc < cout; ++oc) {
            const T* src = gp.plane(n * cout + oc);
            const T* k = wv.data() + (oc * cin + c) * 9;
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx)
                detail::axpy(buf.data(), src + gp.tap(2 - ky, 2 - kx), gp.flat(), k[ky * 3 + kx]);
          }
          detail::add_unpadded(gx.data() + idx * plane, buf.data(), height, width, gp.stride);
        });
      }
      if (weight.requires_grad()) {
        auto gw = weight.grad_mut();
        const detail::PaddedPlanes<T> xp(x.data().data(), batch * cin, height, width);
        parallel_for(cout, [&](std::size_t oc) {
          for (std::size_t c = 0; c < cin; ++c)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                T acc = T(0);
                for (std::size_t n = 0; n < batch; ++n) {
                  acc += detail::dot(gp.interior(n * cout + oc), xp.plane(n * cin + c) + xp.tap(ky, kx), xp.flat());
                }
                gw[(oc * cin + c) * 9 + ky * 3 + kx] += acc;
              }
        });
      }
      if (bias.defined() && bias.requires_grad()) {
        auto gb = bias.grad_mut();
        for (std::size_t idx = 0; idx < batch * cout; ++idx) {
          gb[idx % cout] += detail::sum_n(g.data() + idx * plane, plane);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and activations.

// Normalizes over the channel axis at every spatial location, then applies
// the per-channel affine (weight, bias).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, T eps = T(1e-5)) {
  detail::require_rank4(x, "layer_norm");
  if (!(eps > T(0))) throw ShapeError("layer_norm: eps must be positive");
  const std::size_t batch = x.dim(0), channels = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (weight.numel() != channels || bias.numel() != channels) throw ShapeError("layer_norm: affine size mismatch");
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(batch * plane);
  {
    auto xv = x.data();
    auto o = out.data();
    auto& xh = *xhat;
    auto& rs = *rstd;
    std::vector<T> mu(plane), var(plane);
    for (std::size_t n = 0; n < batch; ++n) {
      std::fill(mu.begin(), mu.end(), T(0));
      std::fill(var.begin(), var.end(), T(0));
      const T* base = xv.data() + n * channels * plane;
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) mu[p] += base[c * plane + p];
      for (std::size_t p = 0; p < plane; ++p) mu[p] /= static_cast<T>(channels);
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t p = 0; p < plane; ++p) {
          const T d = base[c * plane + p] - mu[p];
          var[p] += d * d;
        }
      for (std::size_t p = 0; p < plane; ++p) rs[n * plane + p] = T(1) / std::sqrt(var[p] / static_cast<T>(channels) + eps);
      for (std::size_t c = 0; c < channels; ++c) {
        const T w = weight[c], b = bias[c];
        const std::size_t off = (n * channels + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          const T h = (base[c * plane + p] - mu[p]) * rs[n * plane + p];
          xh[off + p] = h;
          o[off + p] = h * w + b;
        }
      }
    }
  }
  detail::check_finite(out, "layer_norm");
  if (auto* tape = detail::recording_tape(x, weight, bias)) {
    tape->record(out, [x, weight, bias, out, xhat, rstd, batch, channels, plane]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      const auto& xh = *xhat;
      if (weight.requires_grad() || bias.requires_grad()) {
        auto gw = weight.requires_grad() ? weight.grad_mut() : std::span<T>{};
        auto gb = bias.requires_grad() ? bias.grad_mut() : std::span<T>{};
        for (std::size_t n = 0; n < batch; ++n)
          for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t off = (n * channels + c) * plane;
            T aw = T(0), ab = T(0);
            for (std::size_t p = 0; p < plane; ++p) {
              aw += g[off + p] * xh[off + p];
              ab += g[off + p];
            }
            if (!gw.empty()) gw[c] += aw;
            if (!gb.empty()) gb[c] += ab;
          }
      }
      if (x.requires_grad()) {
        auto gx = x.grad_mut();
        std::vector<T> mg(plane), mgx(plane);
        const T inv_c = T(1) / static_cast<T>(channels);
        for (std::size_t n = 0; n < batch; ++n) {
          std::fill(mg.begin(), mg.end(), T(0));
          std::fill(mgx.begin(), mgx.end(), T(0));
          for (std::size_t c = 0; c < channels; ++c) {
            const T w = weight[c];
            const std::size_t off = (n * channels + c) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
              const T gh = g[off + p] * w;
              mg[p] += gh;
              mgx[p] += gh * xh[off + p];
            }
          }
          for (std::size_t c = 0; c < channels; ++c) {
            const T w = weight[c];
            const std::size_t off = (n * channels + c) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
              const T gh = g[off + p] * w;
              gx[off + p] += (*rstd)[n * plane + p] * (gh - mg[p] * inv_c - xh[off + p] * mgx[p] * inv_c);
            }
          }
        }
      }
    });
  }
  return out;
}

// Exact erf form: x * Phi(x).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto o = out.data();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  detail::check_finite(out, "gelu");
  if (auto* tape = detail::recording_tape(x)) {
    tape->record(out, [x, out, inv_sqrt2]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto xv = x.data();
      auto gx = x.grad_mut();
      const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T v = xv[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += g[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

// Softmax along `axis` (negative counts from the end), shifted by the slice max.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
  const int r = static_cast<int>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const std::size_t len = x.dim(axis);
  Tensor<T> out(x.shape());
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t a = 0; a < outer; ++a)
    for (std::size_t b = 0; b < inner; ++b) {
      const std::size_t base = a * len * inner + b;
      T mx = xv[base];
      for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, xv[base + i * inner]);
      T total = T(0);
      for (std::size_t i = 0; i < len; ++i) {
        const T e = std::exp(xv[base + i * inner] - mx);
        o[base + i * inner] = e;
        total += e;
      }
      for (std::size_t i = 0; i < len; ++i) o[base + i * inner] /= total;
    }
  detail::check_finite(out, "softmax");
  if (auto* tape = detail::recording_tape(x)) {
    tape->record(out, [x, out, outer, inner, len]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad_mut();
      for (std::size_t a = 0; a < outer; ++a)
        for (std::size_t b = 0; b < inner; ++b) {
          const std::size_t base = a * len * inner + b;
          T dot = T(0);
          for (std::size_t i = 0; i < len; ++i) dot += g[base + i * inner] * y[base + i * inner];
          for (std::size_t i = 0; i < len; ++i) gx[base + i * inner] += y[base + i * inner] * (g[base + i * inner] - dot);
        }
    });
  }
  return out;
}

// x / max(||x||_2, eps) along the last axis.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12)) {
  const std::size_t len = x.dim(x.rank() - 1), rows = x.numel() / len;
  Tensor<T> out(x.shape());
  auto norms = std::make_shared<std::vector<T>>(rows);
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T ss = T(0);
    for (std::size_t i = 0; i < len; ++i) ss += xv[r * len + i] * xv[r * len + i];
    const T nrm = std::max(std::sqrt(ss), eps);
    (*norms)[r] = nrm;
    for (std::size_t i = 0; i < len; ++i) o[r * len + i] = xv[r * len + i] / nrm;
  }
  detail::check_finite(out, "l2_normalize");
  if (auto* tape = detail::recording_tape(x)) {
    tape->record(out, [x, out, norms, rows, len, eps]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto y = out.data();
      auto gx = x.grad_mut();
      for (std::size_t r = 0; r < rows; ++r) {
        const T nrm = (*norms)[r];
        if (nrm > eps) {
          T dot = T(0);
          for (std::size_t i = 0; i < len; ++i) dot += g[r * len + i] * y[r * len + i];
          for (std::size_t i = 0; i < len; ++i) gx[r * len + i] += (g[r * len + i] - y[r * len + i] * dot) / nrm;
        } else {
          for (std::size_t i = 0; i < len; ++i) gx[r * len + i] += g[r * len + i] / eps;
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resampling. Channel ordering: output channel c * r^2 + i * r + j holds the
// source pixel at row offset i, column offset j of each r x r block.

template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::size_t r = 2) {
  detail::require_rank4(x, "pixel_unshuffle");
  const std::size_t batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
  if (r == 0 || height % r != 0 || width % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial extents of " + shape_str(x.shape()) + " not divisible by " + std::to_string(r));
  }
  const std::size_t oh = height / r, ow = width / r;
  Tensor<T> out(Shape{batch, channels * r * r, oh, ow});
  // index map: out position -> source position
  auto map = std::make_shared<std::vector<std::size_t>>(x.numel());
  auto& m = *map;
  std::size_t k = 0;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j)
          for (std::size_t h = 0; h < oh; ++h)
            for (std::size_t w = 0; w < ow; ++w) m[k++] = ((n * channels + c) * height + h * r + i) * width + w * r + j;
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < m.size(); ++i) o[i] = xv[m[i]];
  if (auto* tape = detail::recording_tape(x)) {
    tape->record(out, [x, out, map]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) gx[(*map)[i]] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::size_t r = 2) {
  detail::require_rank4(x, "pixel_shuffle");
  const std::size_t batch = x.dim(0), channels = x.dim(1), height = x.dim(2), width = x.dim(3);
  if (r == 0 || channels % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channels of " + shape_str(x.shape()) + " not divisible by " + std::to_string(r * r));
  }
  const std::size_t oc = channels / (r * r), oh = height * r, ow = width * r;
  Tensor<T> out(Shape{batch, oc, oh, ow});
  // index map: source position (unshuffled layout) -> out position
  auto map = std::make_shared<std::vector<std::size_t>>(x.numel());
  auto& m = *map;
  std::size_t k = 0;
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t c = 0; c < oc; ++c)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < r; ++j)
          for (std::size_t h = 0; h < height; ++h)
            for (std::size_t w = 0; w < width; ++w) m[k++] = ((n * oc + c) * oh + h * r + i) * ow + w * r + j;
  auto xv = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < m.size(); ++i) o[m[i]] = xv[i];
  if (auto* tape = detail::recording_tape(x)) {
    tape->record(out, [x, out, map]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto gx = x.grad_mut();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[(*map)[i]];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frequency domain.

// Per-plane magnitude of the unnormalized 2-D DFT. The gradient is
// Re(IDFT(g * X / |X|)) with a zero subgradient at bins where |X| == 0.
template <class T>
Tensor<T> fft2_magnitude(const Tensor<T>& x) {
  detail::require_rank4(x, "fft2_magnitude");
  const std::size_t planes = x.dim(0) * x.dim(1), height = x.dim(2), width = x.dim(3), plane = height * width;
  Tensor<T> out(x.shape());
  auto spectra = std::make_shared<std::vector<std::complex<T>>>(x.numel());
  {
    fft::Plan2d<T> plan(height, width);
    auto xv = x.data();
    auto o = out.data();
    auto& sp = *spectra;
    for (std::size_t pl = 0; pl < planes; ++pl) {
      std::span<std::complex<T>> buf(sp.data() + pl * plane, plane);
      for (std::size_t i = 0; i < plane; ++i) buf[i] = {xv[pl * plane + i], T(0)};
      plan.run(buf, false);
      for (std::size_t i = 0; i < plane; ++i) o[pl * plane + i] = std::abs(buf[i]);
    }
  }
  detail::check_finite(out, "fft2_magnitude");
  if (auto* tape = detail::recording_tape(x)) {
    tape->record(out, [x, out, spectra, planes, height, width, plane]() mutable {
      if (!out.has_grad()) return;
      auto g = out.grad();
      auto mag = out.data();
      auto gx = x.grad_mut();
      fft::Plan2d<T> plan(height, width);
      std::vector<std::complex<T>> buf(plane);
      for (std::size_t pl = 0; pl < planes; ++pl) {
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t k = pl * plane + i;
          buf[i] = mag[k] > T(0) ? (*spectra)[k] * (g[k] / mag[k]) : std::complex<T>{};
        }
        plan.run(buf, true);
        for (std::size_t i = 0; i < plane; ++i) gx[pl * plane + i] += buf[i].real();
      }
    });
  }
  return out;
}

}  // namespace deblur
