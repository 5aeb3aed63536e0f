#pragma once

// Unnormalized complex DFT along one axis (radix-2 for powers of two, direct
// summation with an exact twiddle table otherwise) and the 2-D transform
// built from it. Forward: X[k] = sum_n x[n] exp(-2 pi i k n / N). The inverse
// uses the conjugate twiddles and applies no 1/N factor either.

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

namespace deblur::fft {

template <class T>
class Plan1d {
 public:
  explicit Plan1d(std::size_t n) : n_(n), pow2_(n > 0 && (n & (n - 1)) == 0), twiddle_(n) {
    for (std::size_t k = 0; k < n; ++k) {
      double angle = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
      twiddle_[k] = {static_cast<T>(std::cos(angle)), static_cast<T>(std::sin(angle))};
    }
    if (pow2_) {
      bitrev_.resize(n);
      std::size_t bits = 0;
      while ((std::size_t{1} << bits) < n) ++bits;
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t r = 0;
        for (std::size_t b = 0; b < bits; ++b) r |= ((i >> b) & 1u) << (bits - 1 - b);
        bitrev_[i] = r;
      }
    }
    scratch_.resize(n);
  }

  std::size_t size() const { return n_; }

  // In-place transform of `line`, which holds n elements spaced by `stride`.
  void run(std::complex<T>* line, std::size_t stride, bool inverse) {
    for (std::size_t i = 0; i < n_; ++i) scratch_[i] = line[i * stride];
    if (pow2_) {
      radix2(inverse);
    } else {
      direct(inverse);
    }
    for (std::size_t i = 0; i < n_; ++i) line[i * stride] = scratch_[i];
  }

 private:
  std::complex<T> tw(std::size_t k, bool inverse) const {
    return inverse ? std::conj(twiddle_[k]) : twiddle_[k];
  }

  void radix2(bool inverse) {
    for (std::size_t i = 0; i < n_; ++i) {
      if (i < bitrev_[i]) std::swap(scratch_[i], scratch_[bitrev_[i]]);
    }
    for (std::size_t len = 2; len <= n_; len <<= 1) {
      std::size_t half = len / 2;
      std::size_t step = n_ / len;
      for (std::size_t start = 0; start < n_; start += len) {
        for (std::size_t j = 0; j < half; ++j) {
          std::complex<T> w = tw(j * step, inverse);
          std::complex<T> u = scratch_[start + j];
          std::complex<T> v = scratch_[start + j + half] * w;
          scratch_[start + j] = u + v;
          scratch_[start + j + half] = u - v;
        }
      }
    }
  }

  void direct(bool inverse) {
    std::vector<std::complex<T>> out(n_);
    for (std::size_t k = 0; k < n_; ++k) {
      std::complex<T> acc{};
      std::size_t idx = 0;
      for (std::size_t j = 0; j < n_; ++j) {
        acc += scratch_[j] * tw(idx, inverse);
        idx += k;
        if (idx >= n_) idx -= n_;
      }
      out[k] = acc;
    }
    scratch_.swap(out);
  }

  std::size_t n_;
  bool pow2_;
  std::vector<std::complex<T>> twiddle_;
  std::vector<std::size_t> bitrev_;
  std::vector<std::complex<T>> scratch_;
};

// In-place 2-D transform of a row-major height x width plane.
template <class T>
class Plan2d {
 public:
  Plan2d(std::size_t height, std::size_t width) : height_(height), width_(width), rows_(width), cols_(height) {}

  void run(std::span<std::complex<T>> plane, bool inverse) {
    for (std::size_t y = 0; y < height_; ++y) rows_.run(plane.data() + y * width_, 1, inverse);
    for (std::size_t x = 0; x < width_; ++x) cols_.run(plane.data() + x, width_, inverse);
  }

 private:
  std::size_t height_, width_;
  Plan1d<T> rows_;
  Plan1d<T> cols_;
};

}  // namespace deblur::fft
