#pragma once

// Checkpoint file (all integers little-endian u32, floats IEEE-754 binary32 LE):
//
//   magic        8 bytes  "DBLRCKPT"
//   version      u32      1
//   config_len   u32, then config_len bytes of model config text
//   tensor_count u32
//   per tensor, sorted by name:
//     name_len u32, name bytes, rank u32, rank x u32 extents,
//     product(extents) x f32 values
//
// File size is exactly 4 * total_params + checkpoint_header_bytes(config).

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "deblur/config.hpp"
#include "deblur/error.hpp"
#include "deblur/model.hpp"
#include "deblur/params.hpp"

namespace deblur {

inline constexpr std::array<char, 8> kCheckpointMagic{'D', 'B', 'L', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  std::string bytes_;
  std::size_t pos_ = 0;
};

inline std::string config_text(const ModelConfig& cfg) { return cfg.to_kv().dump(); }

}  // namespace detail

// Non-payload bytes of a checkpoint for `cfg`.
inline std::size_t checkpoint_header_bytes(const ModelConfig& cfg) {
  std::size_t bytes = kCheckpointMagic.size() + 4 + 4 + detail::config_text(cfg).size() + 4;
  for (const auto& spec : model_param_specs(cfg)) bytes += 4 + spec.name.size() + 4 + 4 * spec.shape.size();
  return bytes;
}

template <class T>
std::string serialize_checkpoint(const ModelConfig& cfg, const ParamStore<T>& params) {
  check_params(cfg, params);
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_u32(out, kCheckpointVersion);
  const std::string text = detail::config_text(cfg);
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  detail::put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (T v : t.data()) detail::put_f32(out, static_cast<float>(v));
  }
  return out;
}

template <class T>
struct Checkpoint {
  ModelConfig config;
  ParamStore<T> params;
};

template <class T>
Checkpoint<T> deserialize_checkpoint(std::string bytes) {
  detail::ByteReader in(std::move(bytes));
  const std::string magic = in.str(kCheckpointMagic.size());
  if (magic != std::string(kCheckpointMagic.begin(), kCheckpointMagic.end())) throw FormatError("not a checkpoint (bad magic)");
  const std::uint32_t version = in.u32();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  }
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_kv(KeyValues::parse(in.str(in.u32())));
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint config invalid: ") + e.what());
  }
  auto specs = model_param_specs(cfg);
  std::sort(specs.begin(), specs.end(), [](const ParamSpec& a, const ParamSpec& b) { return a.name < b.name; });
  const std::uint32_t count = in.u32();
  if (count != specs.size()) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors, config declares " +
                      std::to_string(specs.size()));
  }
  ParamStore<T> params;
  for (const auto& spec : specs) {
    const std::string name = in.str(in.u32());
    if (name != spec.name) throw FormatError("checkpoint tensor '" + name + "' where '" + spec.name + "' expected");
    const std::uint32_t rank = in.u32();
    if (rank > 8) throw FormatError("checkpoint tensor " + name + " has implausible rank");
    Shape shape(rank);
    for (auto& d : shape) d = in.u32();
    if (shape != spec.shape) {
      throw FormatError("checkpoint tensor " + name + " has shape " + shape_str(shape) + ", config declares " +
                        shape_str(spec.shape));
    }
    Tensor<T> t(shape);
    for (T& v : t.data()) v = static_cast<T>(in.f32());
    params.add(name, std::move(t));
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint payload");
  return {cfg, std::move(params)};
}

template <class T>
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamStore<T>& params) {
  const std::string bytes = serialize_checkpoint(cfg, params);
  // staged in a temporary file, then renamed over `path`
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot write checkpoint: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw DataError("failed writing checkpoint: " + path);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw DataError("cannot move checkpoint into place: " + path);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read checkpoint: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return deserialize_checkpoint<T>(ss.str());
}

}  // namespace deblur
