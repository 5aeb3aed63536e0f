#pragma once

// Planar RGB images in [0,1] and binary PPM (P6) file I/O.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "deblur/error.hpp"
#include "deblur/tensor.hpp"

namespace deblur {

struct Image {
  static constexpr std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  int bit_depth = 8;
  std::vector<float> data;  // channel-major: data[(c * height + y) * width + x]

  Image() = default;
  Image(std::size_t h, std::size_t w, float fill = 0.0f) : height(h), width(w), data(channels * h * w, fill) {}

  std::size_t plane() const { return height * width; }
  float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }
  bool same_size(const Image& o) const { return height == o.height && width == o.width; }
  bool operator==(const Image& o) const { return same_size(o) && data == o.data; }
};

inline void clamp_unit(Image& img) {
  for (float& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
}

inline std::uint8_t quantize8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

// Stacks equally sized images into an N x 3 x H x W tensor.
template <class T>
Tensor<T> to_tensor(const std::vector<Image>& images) {
  if (images.empty()) throw ShapeError("to_tensor: no images");
  const Image& first = images.front();
  Tensor<T> out(Shape{images.size(), Image::channels, first.height, first.width});
  auto o = out.data();
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (!images[n].same_size(first)) throw ShapeError("to_tensor: images differ in size");
    std::copy(images[n].data.begin(), images[n].data.end(), o.begin() + n * first.data.size());
  }
  return out;
}

template <class T>
Image from_tensor(const Tensor<T>& t, std::size_t n) {
  if (t.rank() != 4 || t.dim(1) != Image::channels) throw ShapeError("from_tensor: expected N x 3 x H x W");
  Image img(t.dim(2), t.dim(3));
  const std::size_t count = img.data.size();
  auto d = t.data();
  for (std::size_t i = 0; i < count; ++i) img.data[i] = static_cast<float>(d[n * count + i]);
  return img;
}

// Index into [0, n) with mirror reflection about the edge pixels (no edge
// repeat), folding repeatedly for offsets larger than n.
inline std::size_t reflect_index(long long i, std::size_t n) {
  if (n == 1) return 0;
  const long long period = 2 * (static_cast<long long>(n) - 1);
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<long long>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

inline constexpr std::size_t kMaxImageSide = 1u << 15;

namespace detail {

class PpmCursor {
 public:
  explicit PpmCursor(const std::string& bytes) : b_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(b_[pos_]))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    std::size_t v = 0, digits = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
      if (v > 1000000000) throw FormatError(std::string("PPM ") + what + " is too large");
      ++pos_;
      ++digits;
    }
    if (digits == 0) throw FormatError(std::string("PPM header: missing ") + what);
    return v;
  }

  std::size_t pos_ = 0;

 private:
  const std::string& b_;
};

}  // namespace detail

inline Image decode_ppm(const std::string& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError("unsupported image format (expected binary PPM P6)");
  if (bytes[1] != '6') throw FormatError(std::string("unsupported PPM variant P") + bytes[1] + " (only P6 is supported)");
  detail::PpmCursor cur(bytes);
  cur.pos_ = 2;
  const std::size_t width = cur.number("width");
  const std::size_t height = cur.number("height");
  const std::size_t maxval = cur.number("maxval");
  if (width == 0 || height == 0) throw FormatError("PPM has zero width or height");
  if (width > kMaxImageSide || height > kMaxImageSide) {
    throw FormatError("PPM dimensions " + std::to_string(width) + "x" + std::to_string(height) + " exceed the limit of " +
                      std::to_string(kMaxImageSide));
  }
  if (maxval == 0 || maxval > 255) throw FormatError("unsupported PPM maxval " + std::to_string(maxval) + " (8-bit only)");
  if (cur.pos_ >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[cur.pos_]))) {
    throw FormatError("PPM header not terminated by whitespace");
  }
  ++cur.pos_;
  const std::size_t need = width * height * 3;
  if (bytes.size() - cur.pos_ < need) {
    throw FormatError("truncated PPM payload: expected " + std::to_string(need) + " bytes, found " +
                      std::to_string(bytes.size() - cur.pos_));
  }
  Image img(height, width);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + cur.pos_);
  const float scale = static_cast<float>(maxval);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(p[(y * width + x) * 3 + c]) / scale;
  return img;
}

inline std::string encode_ppm(const Image& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + img.plane() * 3);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out[header + (y * img.width + x) * 3 + c] = static_cast<char>(quantize8(img.at(c, y, x)));
  return out;
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline Image load_image(const std::string& path) {
  const std::string ext = std::filesystem::path(path).extension().string();
  if (ext != ".ppm" && ext != ".PPM") throw FormatError("unsupported image format '" + ext + "': " + path);
  try {
    return decode_ppm(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void save_image(const Image& img, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  const std::string bytes = encode_ppm(img);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed: " + path);
}

}  // namespace deblur
