#pragma once

#include <cmath>
#include <string>

#include "deblur/error.hpp"
#include "deblur/ops.hpp"

namespace deblur {

struct LossConfig {
  double lambda_freq = 0.1;

  void validate() const {
    if (!std::isfinite(lambda_freq) || lambda_freq < 0.0) throw ConfigError("loss.lambda_freq must be finite and >= 0");
  }
};

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shapes differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

// mean |pred - target| over every element.
template <class T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same_shape(pred, target, "l1_loss");
  return mean(abs(sub(pred, target)));
}

// Batch mean of the per-image mean |(|F(pred)| - |F(target)|)| over channels
// and frequency bins. Every image has the same size, so this is the mean over
// all bins of the batch.
template <class T>
Tensor<T> freq_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  detail::require_same_shape(pred, target, "freq_loss");
  return mean(abs(sub(fft2_magnitude(pred), fft2_magnitude(target))));
}

// l1 + lambda * freq. lambda == 0 skips the spectral term entirely.
template <class T>
Tensor<T> total_loss(const Tensor<T>& pred, const Tensor<T>& target, const LossConfig& cfg) {
  cfg.validate();
  Tensor<T> pixel = l1_loss(pred, target);
  if (cfg.lambda_freq == 0.0) return pixel;
  return add(pixel, scale(freq_loss(pred, target), static_cast<T>(cfg.lambda_freq)));
}

}  // namespace deblur
