#pragma once

// Paired blurred/sharp datasets: directory scanning, manifests, validation
// splits and aligned patch sampling.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "deblur/config.hpp"
#include "deblur/error.hpp"
#include "deblur/image.hpp"

namespace deblur {

namespace fs = std::filesystem;

struct PairEntry {
  std::string id;
  std::string blur_path;
  std::string sharp_path;
};

struct PairedDataset {
  std::string root;
  std::vector<PairEntry> pairs;  // sorted by id
  std::uint64_t checksum = 0;
  std::vector<std::string> warnings;

  std::size_t size() const { return pairs.size(); }
};

struct ImagePair {
  Image blur;
  Image sharp;
};

enum class Layout { kParallelDirs, kManifest };

inline constexpr const char* kManifestName = "pairs.tsv";

// FNV-1a over the sorted (id, blur, sharp) listing.
inline std::uint64_t listing_checksum(const std::vector<PairEntry>& pairs) {
  std::uint64_t h = 1469598103934665603ull;
  auto feed = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ull;
    }
    h ^= 0xff;
    h *= 1099511628211ull;
  };
  for (const auto& p : pairs) {
    feed(p.id);
    feed(p.blur_path);
    feed(p.sharp_path);
  }
  return h;
}

struct PpmSize {
  std::size_t height = 0, width = 0;
};

// Reads only the header of a PPM file.
inline PpmSize ppm_size(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::string head(512, '\0');
  f.read(head.data(), static_cast<std::streamsize>(head.size()));
  head.resize(static_cast<std::size_t>(f.gcount()));
  if (head.size() < 2 || head[0] != 'P' || head[1] != '6') throw FormatError(path + ": not a binary PPM (P6)");
  detail::PpmCursor cur(head);
  cur.pos_ = 2;
  try {
    const std::size_t w = cur.number("width");
    const std::size_t h = cur.number("height");
    return {h, w};
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

namespace detail {

inline bool is_image_file(const fs::path& p) {
  const std::string ext = p.extension().string();
  return ext == ".ppm" || ext == ".PPM";
}

// Image files of a directory keyed by file stem.
inline std::map<std::string, std::string> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) out[e.path().stem().string()] = e.path().string();
  }
  return out;
}

inline void check_pair_sizes(const PairEntry& p) {
  const PpmSize a = ppm_size(p.blur_path), b = ppm_size(p.sharp_path);
  if (a.height != b.height || a.width != b.width) {
    throw DataError("pair '" + p.id + "' has mismatched dimensions: " + std::to_string(a.width) + "x" +
                    std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" + std::to_string(b.height));
  }
}

}  // namespace detail

// Matches files by stem across two directories. Files present on one side
// only are reported as warnings.
inline std::vector<PairEntry> match_dirs(const fs::path& a_dir, const fs::path& b_dir, std::vector<std::string>& warnings) {
  const auto a = detail::list_images(a_dir), b = detail::list_images(b_dir);
  std::vector<PairEntry> pairs;
  for (const auto& [id, path] : a) {
    auto it = b.find(id);
    if (it == b.end()) {
      warnings.push_back("no match in " + b_dir.string() + " for " + path);
    } else {
      pairs.push_back({id, path, it->second});
    }
  }
  for (const auto& [id, path] : b) {
    if (!a.count(id)) warnings.push_back("no match in " + a_dir.string() + " for " + path);
  }
  return pairs;
}

inline std::vector<PairEntry> read_manifest(const fs::path& manifest) {
  std::ifstream f(manifest);
  if (!f) throw DataError("cannot read manifest " + manifest.string());
  const fs::path base = manifest.parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (base / p).string(); };
  std::vector<PairEntry> pairs;
  std::set<std::string> seen;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::istringstream ls(line);
    std::string item;
    while (std::getline(ls, item, '\t')) fields.push_back(item);
    if (fields.size() != 3) {
      throw DataError(manifest.string() + ":" + std::to_string(lineno) + ": expected id<TAB>blur<TAB>sharp");
    }
    if (!seen.insert(fields[0]).second) {
      throw DataError(manifest.string() + ":" + std::to_string(lineno) + ": duplicate id " + fields[0]);
    }
    PairEntry e{fields[0], resolve(fields[1]), resolve(fields[2])};
    for (const auto* p : {&e.blur_path, &e.sharp_path}) {
      if (!fs::is_regular_file(*p)) throw DataError("manifest entry '" + e.id + "': file not found: " + *p);
    }
    pairs.push_back(std::move(e));
  }
  return pairs;
}

// Parallel-dirs layout reads root/blur and root/sharp. Manifest layout
// reads `root` itself when it is a file, otherwise root/pairs.tsv.
inline PairedDataset scan_pairs(const std::string& root, Layout layout = Layout::kParallelDirs) {
  PairedDataset ds;
  ds.root = root;
  if (!fs::exists(root)) throw DataError("dataset path not found: " + root);
  if (layout == Layout::kParallelDirs) {
    ds.pairs = match_dirs(fs::path(root) / "blur", fs::path(root) / "sharp", ds.warnings);
  } else {
    const fs::path manifest = fs::is_directory(root) ? fs::path(root) / kManifestName : fs::path(root);
    ds.pairs = read_manifest(manifest);
  }
  std::sort(ds.pairs.begin(), ds.pairs.end(), [](const PairEntry& a, const PairEntry& b) { return a.id < b.id; });
  if (ds.pairs.empty()) throw DataError("no image pairs found under " + root);
  for (const auto& p : ds.pairs) detail::check_pair_sizes(p);
  ds.checksum = listing_checksum(ds.pairs);
  return ds;
}

inline Layout parse_layout(const std::string& s) {
  if (s == "dirs") return Layout::kParallelDirs;
  if (s == "manifest") return Layout::kManifest;
  throw ConfigError("data.layout must be 'dirs' or 'manifest', got '" + s + "'");
}

// Ids listed one per line ('#' comments allowed).
inline std::vector<std::string> read_split_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read split file " + path);
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(f, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::string t = detail::trim(line);
    if (!t.empty()) ids.push_back(t);
  }
  return ids;
}

// Moves the listed ids into the second dataset. Unknown ids are an error.
inline std::pair<PairedDataset, PairedDataset> split_dataset(const PairedDataset& ds, const std::vector<std::string>& val_ids) {
  std::set<std::string> want(val_ids.begin(), val_ids.end());
  PairedDataset train{ds.root, {}, 0, ds.warnings}, val{ds.root, {}, 0, {}};
  for (const auto& p : ds.pairs) {
    if (want.erase(p.id)) val.pairs.push_back(p);
    else train.pairs.push_back(p);
  }
  if (!want.empty()) throw DataError("split file names unknown id: " + *want.begin());
  if (train.pairs.empty()) throw DataError("split leaves no training pairs");
  train.checksum = listing_checksum(train.pairs);
  val.checksum = listing_checksum(val.pairs);
  return {std::move(train), std::move(val)};
}

inline ImagePair load_pair(const PairEntry& e) {
  ImagePair p{load_image(e.blur_path), load_image(e.sharp_path)};
  if (!p.blur.same_size(p.sharp)) throw DataError("pair '" + e.id + "' has mismatched dimensions");
  return p;
}

inline std::vector<ImagePair> load_pairs(const PairedDataset& ds) {
  std::vector<ImagePair> out;
  out.reserve(ds.size());
  for (const auto& e : ds.pairs) out.push_back(load_pair(e));
  return out;
}

struct CropWindow {
  long long top = 0, left = 0;  // negative when the image is smaller than the patch
};

// Along each axis: a uniform offset when the image is large enough,
// otherwise the image centered and reflect-padded.
template <class Rng>
CropWindow crop_window(std::size_t height, std::size_t width, std::size_t size, Rng& rng) {
  auto axis = [&](std::size_t extent) -> long long {
    if (extent >= size) {
      std::uniform_int_distribution<std::size_t> d(0, extent - size);
      return static_cast<long long>(d(rng));
    }
    return -static_cast<long long>((size - extent) / 2);
  };
  CropWindow w;
  w.top = axis(height);
  w.left = axis(width);
  return w;
}

inline Image crop(const Image& img, const CropWindow& w, std::size_t size) {
  Image out(size, size);
  out.bit_depth = img.bit_depth;
  for (std::size_t c = 0; c < Image::channels; ++c)
    for (std::size_t y = 0; y < size; ++y) {
      const std::size_t sy = reflect_index(w.top + static_cast<long long>(y), img.height);
      for (std::size_t x = 0; x < size; ++x) {
        out.at(c, y, x) = img.at(c, sy, reflect_index(w.left + static_cast<long long>(x), img.width));
      }
    }
  return out;
}

template <class Rng>
ImagePair sample_patch(const ImagePair& pair, std::size_t size, Rng& rng) {
  if (size == 0) throw ConfigError("patch size must be positive");
  if (!pair.blur.same_size(pair.sharp)) throw DataError("sample_patch: pair images differ in size");
  const CropWindow w = crop_window(pair.blur.height, pair.blur.width, size, rng);
  return {crop(pair.blur, w, size), crop(pair.sharp, w, size)};
}

}  // namespace deblur
