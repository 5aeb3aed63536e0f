#pragma once

// Synthetic images, blur pairs and scratch directories for tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "deblur/dataio.hpp"
#include "deblur/image.hpp"

namespace testing_support {

inline deblur::Image random_image(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  deblur::Image img(h, w);
  for (float& v : img.data) v = u(rng);
  return img;
}

// Image with every value already on the 8-bit grid, so a save/load round trip is exact.
inline deblur::Image random_image8(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, 255);
  deblur::Image img(h, w);
  for (float& v : img.data) v = static_cast<float>(u(rng)) / 255.0f;
  return img;
}

// Smooth sinusoids over a coarse checkerboard: sharp edges for a blur to destroy.
inline deblur::Image pattern(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double fx[3], fy[3], ph[3], amp[3];
  for (int k = 0; k < 3; ++k) {
    fx[k] = u(rng) * 0.5;
    fy[k] = u(rng) * 0.5;
    ph[k] = u(rng) * 6.28;
    amp[k] = 0.1 + 0.05 * u(rng);
  }
  deblur::Image img(h, w);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double v = ((x / 6 + y / 5 + seed) % 2) ? 0.7 : 0.3;
        for (int k = 0; k < 3; ++k) {
          v += amp[k] * std::sin(fx[k] * static_cast<double>(x) * (c + 1) * 0.7 + fy[k] * static_cast<double>(y) + ph[k] + c);
        }
        img.at(c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return img;
}

// Horizontal box blur of odd length with reflected borders.
inline deblur::Image motion_blur(const deblur::Image& s, int length = 7) {
  deblur::Image o(s.height, s.width);
  const int r = length / 2;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t x = 0; x < s.width; ++x) {
        double a = 0;
        for (int k = -r; k <= r; ++k) a += s.at(c, y, deblur::reflect_index(static_cast<long long>(x) + k, s.width));
        o.at(c, y, x) = static_cast<float>(a / length);
      }
  return o;
}

inline std::vector<deblur::ImagePair> blur_pairs(std::size_t count, std::size_t size, std::uint64_t seed = 1) {
  std::vector<deblur::ImagePair> out;
  for (std::size_t i = 0; i < count; ++i) {
    deblur::Image sharp = pattern(size, size, seed + i);
    out.push_back({motion_blur(sharp), sharp});
  }
  return out;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("deblur_" + tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str() const { return path_.string(); }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) { return deblur::read_file(p.string()); }

}  // namespace testing_support
