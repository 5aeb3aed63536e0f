#pragma once

// Paired training augmentation. Random parameters are drawn once per sample
// and applied identically to the blurred and the sharp image.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "deblur/config.hpp"
#include "deblur/dataio.hpp"
#include "deblur/error.hpp"
#include "deblur/image.hpp"

namespace deblur {

struct AugmentConfig {
  double p_hflip = 0.5;
  double p_vflip = 0.5;
  double p_jitter = 0.3;
  double brightness = 0.2;
  double contrast = 0.2;
  double saturation = 0.2;
  double hue = 0.05;  // fraction of a full turn
  double p_blur = 0.3;
  double blur_sigma_min = 0.1;
  double blur_sigma_max = 1.0;
  std::size_t blur_kernel = 5;
  double p_perspective = 0.3;
  double perspective_scale = 0.1;  // max corner offset as a fraction of the side
  std::uint64_t seed = 0;

  // Everything disabled.
  static AugmentConfig none() {
    AugmentConfig c;
    c.p_hflip = c.p_vflip = c.p_jitter = c.p_blur = c.p_perspective = 0.0;
    c.brightness = c.contrast = c.saturation = c.hue = 0.0;
    c.perspective_scale = 0.0;
    return c;
  }

  void validate() const {
    for (double p : {p_hflip, p_vflip, p_jitter, p_blur, p_perspective}) {
      if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augment probabilities must lie in [0, 1]");
    }
    for (double s : {brightness, contrast, saturation, hue, perspective_scale}) {
      if (!(s >= 0.0 && std::isfinite(s))) throw ConfigError("augment strengths must be finite and >= 0");
    }
    if (brightness > 1.0 || contrast > 1.0 || saturation > 1.0) {
      throw ConfigError("brightness/contrast/saturation strengths must be <= 1");
    }
    if (!(blur_sigma_min >= 0.0 && blur_sigma_max >= blur_sigma_min)) {
      throw ConfigError("augment blur sigma range must satisfy 0 <= min <= max");
    }
    if (blur_kernel == 0 || blur_kernel % 2 == 0) throw ConfigError("augment.blur_kernel must be odd");
    if (perspective_scale >= 0.5) throw ConfigError("augment.perspective_scale must be < 0.5");
  }

  KeyValues to_kv() const {
    KeyValues kv;
    kv.set("augment.p_hflip", format_double(p_hflip));
    kv.set("augment.p_vflip", format_double(p_vflip));
    kv.set("augment.p_jitter", format_double(p_jitter));
    kv.set("augment.brightness", format_double(brightness));
    kv.set("augment.contrast", format_double(contrast));
    kv.set("augment.saturation", format_double(saturation));
    kv.set("augment.hue", format_double(hue));
    kv.set("augment.p_blur", format_double(p_blur));
    kv.set("augment.blur_sigma_min", format_double(blur_sigma_min));
    kv.set("augment.blur_sigma_max", format_double(blur_sigma_max));
    kv.set("augment.blur_kernel", std::to_string(blur_kernel));
    kv.set("augment.p_perspective", format_double(p_perspective));
    kv.set("augment.perspective_scale", format_double(perspective_scale));
    kv.set("augment.seed", std::to_string(seed));
    return kv;
  }

  static AugmentConfig from_kv(const KeyValues& kv) {
    AugmentConfig c;
    c.p_hflip = kv.get_double("augment.p_hflip");
    c.p_vflip = kv.get_double("augment.p_vflip");
    c.p_jitter = kv.get_double("augment.p_jitter");
    c.brightness = kv.get_double("augment.brightness");
    c.contrast = kv.get_double("augment.contrast");
    c.saturation = kv.get_double("augment.saturation");
    c.hue = kv.get_double("augment.hue");
    c.p_blur = kv.get_double("augment.p_blur");
    c.blur_sigma_min = kv.get_double("augment.blur_sigma_min");
    c.blur_sigma_max = kv.get_double("augment.blur_sigma_max");
    const long long k = kv.get_int("augment.blur_kernel");
    if (k <= 0) throw ConfigError("augment.blur_kernel must be positive");
    c.blur_kernel = static_cast<std::size_t>(k);
    c.p_perspective = kv.get_double("augment.p_perspective");
    c.perspective_scale = kv.get_double("augment.perspective_scale");
    const long long s = kv.get_int("augment.seed");
    if (s < 0) throw ConfigError("augment.seed must be >= 0");
    c.seed = static_cast<std::uint64_t>(s);
    c.validate();
    return c;
  }
};

// splitmix64 finalizer over (master, index).
inline std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  };
  return mix(master ^ mix(index));
}

inline Image hflip(const Image& img) {
  Image out = img;
  for (std::size_t c = 0; c < Image::channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

inline Image vflip(const Image& img) {
  Image out = img;
  for (std::size_t c = 0; c < Image::channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, img.height - 1 - y, x);
  return out;
}

// Normalized sampled Gaussian of odd length. sigma <= 0 gives a delta.
inline std::vector<double> gaussian_kernel(double sigma, std::size_t size) {
  if (size == 0 || size % 2 == 0) throw ConfigError("gaussian kernel size must be odd, got " + std::to_string(size));
  std::vector<double> k(size, 0.0);
  const long long r = static_cast<long long>(size / 2);
  if (!(sigma > 0.0)) {
    k[static_cast<std::size_t>(r)] = 1.0;
    return k;
  }
  double total = 0.0;
  for (long long i = -r; i <= r; ++i) {
    const double v = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(i + r)] = v;
    total += v;
  }
  for (double& v : k) v /= total;
  return k;
}

// Separable blur with reflect padding.
inline Image gaussian_blur(const Image& img, double sigma, std::size_t size) {
  const auto k = gaussian_kernel(sigma, size);
  const long long r = static_cast<long long>(size / 2);
  Image tmp(img.height, img.width), out(img.height, img.width);
  out.bit_depth = img.bit_depth;
  for (std::size_t c = 0; c < Image::channels; ++c) {
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (long long i = -r; i <= r; ++i)
          acc += k[static_cast<std::size_t>(i + r)] * img.at(c, y, reflect_index(static_cast<long long>(x) + i, img.width));
        tmp.at(c, y, x) = static_cast<float>(acc);
      }
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (long long i = -r; i <= r; ++i)
          acc += k[static_cast<std::size_t>(i + r)] * tmp.at(c, reflect_index(static_cast<long long>(y) + i, img.height), x);
        out.at(c, y, x) = static_cast<float>(acc);
      }
  }
  return out;
}

struct JitterParams {
  double brightness = 1.0;  // multiplicative factors
  double contrast = 1.0;
  double saturation = 1.0;
  double hue = 0.0;  // turns
};

// brightness, contrast about the mean luma, saturation about per-pixel luma,
// then a hue rotation in the YIQ chroma plane. Clamped after each stage.
inline Image color_jitter(const Image& img, const JitterParams& j) {
  Image out = img;
  const std::size_t p = img.plane();
  auto luma = [&](std::size_t i) {
    return 0.299 * out.data[i] + 0.587 * out.data[p + i] + 0.114 * out.data[2 * p + i];
  };
  if (j.brightness != 1.0) {
    for (float& v : out.data) v = static_cast<float>(v * j.brightness);
    clamp_unit(out);
  }
  if (j.contrast != 1.0) {
    double mean = 0.0;
    for (std::size_t i = 0; i < p; ++i) mean += luma(i);
    mean /= static_cast<double>(p);
    for (float& v : out.data) v = static_cast<float>((v - mean) * j.contrast + mean);
    clamp_unit(out);
  }
  if (j.saturation != 1.0) {
    for (std::size_t i = 0; i < p; ++i) {
      const double g = luma(i);
      for (std::size_t c = 0; c < 3; ++c) out.data[c * p + i] = static_cast<float>(g + (out.data[c * p + i] - g) * j.saturation);
    }
    clamp_unit(out);
  }
  if (j.hue != 0.0) {
    const double th = 2.0 * std::numbers::pi * j.hue, cs = std::cos(th), sn = std::sin(th);
    for (std::size_t i = 0; i < p; ++i) {
      const double r = out.data[i], g = out.data[p + i], b = out.data[2 * p + i];
      const double yy = 0.299 * r + 0.587 * g + 0.114 * b;
      const double ii = 0.596 * r - 0.274 * g - 0.322 * b;
      const double qq = 0.211 * r - 0.523 * g + 0.312 * b;
      const double i2 = ii * cs - qq * sn, q2 = ii * sn + qq * cs;
      out.data[i] = static_cast<float>(yy + 0.956 * i2 + 0.621 * q2);
      out.data[p + i] = static_cast<float>(yy - 0.272 * i2 - 0.647 * q2);
      out.data[2 * p + i] = static_cast<float>(yy - 1.106 * i2 + 1.703 * q2);
    }
    clamp_unit(out);
  }
  return out;
}

// Pixel offsets (dx, dy) of the corners top-left, top-right, bottom-right,
// bottom-left.
using CornerOffsets = std::array<double, 8>;

namespace detail {

// Solves a * x = b in place (Gaussian elimination, partial pivoting).
inline std::array<double, 8> solve8(std::array<std::array<double, 8>, 8> a, std::array<double, 8> b) {
  for (std::size_t col = 0; col < 8; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < 8; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (std::abs(a[piv][col]) < 1e-12) throw NumericError("degenerate homography");
    std::swap(a[col], a[piv]);
    std::swap(b[col], b[piv]);
    for (std::size_t r = col + 1; r < 8; ++r) {
      const double f = a[r][col] / a[col][col];
      for (std::size_t c = col; c < 8; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  std::array<double, 8> x{};
  for (std::size_t i = 8; i-- > 0;) {
    double s = b[i];
    for (std::size_t c = i + 1; c < 8; ++c) s -= a[i][c] * x[c];
    x[i] = s / a[i][i];
  }
  return x;
}

inline double snap(double v) {
  const double r = std::round(v);
  return std::abs(v - r) < 1e-9 ? r : v;
}

}  // namespace detail

// 3x3 homography (h33 = 1) taking each `from` corner to the matching `to` corner.
inline std::array<double, 9> homography(const std::array<double, 8>& from, const std::array<double, 8>& to) {
  std::array<std::array<double, 8>, 8> a{};
  std::array<double, 8> b{};
  for (std::size_t i = 0; i < 4; ++i) {
    const double x = from[2 * i], y = from[2 * i + 1], u = to[2 * i], v = to[2 * i + 1];
    a[2 * i] = {x, y, 1, 0, 0, 0, -u * x, -u * y};
    b[2 * i] = u;
    a[2 * i + 1] = {0, 0, 0, x, y, 1, -v * x, -v * y};
    b[2 * i + 1] = v;
  }
  const auto h = detail::solve8(a, b);
  return {h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0};
}

inline bool convex_quad(const std::array<double, 8>& q) {
  int sign = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t j = (i + 1) % 4, k = (i + 2) % 4;
    const double cross = (q[2 * j] - q[2 * i]) * (q[2 * k + 1] - q[2 * j + 1]) -
                         (q[2 * j + 1] - q[2 * i + 1]) * (q[2 * k] - q[2 * j]);
    if (std::abs(cross) < 1e-12) return false;
    const int s = cross > 0 ? 1 : -1;
    if (sign != 0 && s != sign) return false;
    sign = s;
  }
  return true;
}

// Warps so that the image corners move by `offsets`. Output pixels are
// sampled bilinearly from the inverse mapping; outside samples replicate the
// nearest edge.
inline Image perspective(const Image& img, const CornerOffsets& offsets) {
  if (std::all_of(offsets.begin(), offsets.end(), [](double v) { return v == 0.0; })) return img;
  const double w1 = static_cast<double>(img.width - 1), h1 = static_cast<double>(img.height - 1);
  const std::array<double, 8> src{0, 0, w1, 0, w1, h1, 0, h1};
  std::array<double, 8> dst{};
  for (std::size_t i = 0; i < 8; ++i) dst[i] = src[i] + offsets[i];
  if (!convex_quad(dst)) throw NumericError("degenerate homography: displaced corners do not form a convex quad");
  const auto h = homography(dst, src);  // output pixel -> source position
  Image out(img.height, img.width);
  out.bit_depth = img.bit_depth;
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x) {
      const double xd = static_cast<double>(x), yd = static_cast<double>(y);
      const double den = h[6] * xd + h[7] * yd + h[8];
      if (std::abs(den) < 1e-12) throw NumericError("degenerate homography");
      const double sx = std::clamp(detail::snap((h[0] * xd + h[1] * yd + h[2]) / den), 0.0, w1);
      const double sy = std::clamp(detail::snap((h[3] * xd + h[4] * yd + h[5]) / den), 0.0, h1);
      const std::size_t x0 = static_cast<std::size_t>(std::floor(sx)), y0 = static_cast<std::size_t>(std::floor(sy));
      const std::size_t xn = std::min(x0 + 1, img.width - 1), yn = std::min(y0 + 1, img.height - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::size_t c = 0; c < Image::channels; ++c) {
        const double top = img.at(c, y0, x0) * (1 - fx) + img.at(c, y0, xn) * fx;
        const double bot = img.at(c, yn, x0) * (1 - fx) + img.at(c, yn, xn) * fx;
        out.at(c, y, x) = static_cast<float>(top * (1 - fy) + bot * fy);
      }
    }
  return out;
}

// Concrete draw of every random choice for one sample.
struct AugmentParams {
  bool hflip = false;
  bool vflip = false;
  bool perspective = false;
  CornerOffsets offsets{};
  bool jitter = false;
  JitterParams color;
  bool blur = false;
  double sigma = 0.0;
  std::size_t kernel = 1;
};

// Draw order is fixed, and every draw happens whether or not the transform
// fires, so each parameter depends only on the seed.
template <class Rng>
AugmentParams sample_augment(const AugmentConfig& cfg, std::size_t height, std::size_t width, Rng& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto sym = [&](double s) { return (2.0 * u(rng) - 1.0) * s; };
  AugmentParams p;
  p.hflip = u(rng) < cfg.p_hflip;
  p.vflip = u(rng) < cfg.p_vflip;
  p.perspective = u(rng) < cfg.p_perspective;
  for (std::size_t i = 0; i < 8; ++i) {
    const double side = static_cast<double>(i % 2 == 0 ? width - 1 : height - 1);
    p.offsets[i] = sym(cfg.perspective_scale) * side;
  }
  p.jitter = u(rng) < cfg.p_jitter;
  p.color.brightness = 1.0 + sym(cfg.brightness);
  p.color.contrast = 1.0 + sym(cfg.contrast);
  p.color.saturation = 1.0 + sym(cfg.saturation);
  p.color.hue = sym(cfg.hue);
  p.blur = u(rng) < cfg.p_blur;
  p.sigma = cfg.blur_sigma_min + u(rng) * (cfg.blur_sigma_max - cfg.blur_sigma_min);
  p.kernel = cfg.blur_kernel;
  return p;
}

inline Image apply_augment(const Image& img, const AugmentParams& p) {
  Image out = img;
  if (p.hflip) out = hflip(out);
  if (p.vflip) out = vflip(out);
  if (p.perspective) out = perspective(out, p.offsets);
  if (p.jitter) out = color_jitter(out, p.color);
  if (p.blur) out = gaussian_blur(out, p.sigma, p.kernel);
  clamp_unit(out);
  return out;
}

template <class Rng>
ImagePair apply(const ImagePair& pair, const AugmentConfig& cfg, Rng& rng) {
  if (!pair.blur.same_size(pair.sharp)) throw DataError("augment: pair images differ in size");
  const AugmentParams p = sample_augment(cfg, pair.blur.height, pair.blur.width, rng);
  return {apply_augment(pair.blur, p), apply_augment(pair.sharp, p)};
}

}  // namespace deblur
