#pragma once

// Central finite-difference checks for reverse-mode gradients (double).

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "deblur/ops.hpp"

namespace testing_support {

using deblur::Shape;
using deblur::Tensor;

inline Tensor<double> random_tensor(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(shape);
  for (double& v : t.data()) v = u(rng);
  return t;
}

struct GradReport {
  double max_rel = 0.0;
  double max_abs = 0.0;
  std::size_t checked = 0;
};

// |a - n| / max(|a|, |n|, floor)
inline double rel_err(double a, double n, double floor = 1e-3) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// `loss` builds a scalar from the current values of `leaves`. Every leaf
// element is perturbed by +-h (or every `stride`-th element when stride > 1).
inline GradReport check_gradients(const std::function<Tensor<double>()>& loss, std::vector<Tensor<double>> leaves,
                                  double h = 1e-6, std::size_t stride = 1) {
  for (auto& l : leaves) {
    l.set_requires_grad(true);
    l.zero_grad();
  }
  {
    deblur::Tape<double> tape;
    deblur::TapeGuard<double> guard(tape);
    Tensor<double> out = loss();
    tape.backward(out);
  }
  auto eval = [&] {
    deblur::NoGradGuard<double> off;
    return loss().item();
  };
  GradReport rep;
  for (auto& l : leaves) {
    std::vector<double> analytic(l.numel(), 0.0);
    if (l.has_grad()) std::copy(l.grad().begin(), l.grad().end(), analytic.begin());
    for (std::size_t i = 0; i < l.numel(); i += stride) {
      const double orig = l[i];
      l[i] = orig + h;
      const double up = eval();
      l[i] = orig - h;
      const double down = eval();
      l[i] = orig;
      const double numeric = (up - down) / (2 * h);
      rep.max_rel = std::max(rep.max_rel, rel_err(analytic[i], numeric));
      rep.max_abs = std::max(rep.max_abs, std::abs(analytic[i] - numeric));
      ++rep.checked;
    }
  }
  return rep;
}

// sum(out * weights) with fixed random weights, so every output element
// contributes a distinct sensitivity.
inline Tensor<double> probe(const Tensor<double>& out, std::uint64_t seed = 99) {
  const Tensor<double> w = random_tensor(out.shape(), seed);
  return deblur::sum(deblur::mul(out, w));
}

}  // namespace testing_support
