#pragma once

// Flat-section key/value configuration text:
//
//   # comment
//   [model]
//   base_channels = 48
//   enc_blocks = 4, 6, 6, 8
//
// Keys are addressed as "section.key". Overrides use the same dotted form
// ("loss.lambda_freq=0").

#include <charconv>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "deblur/error.hpp"

namespace deblur {

namespace detail {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

}  // namespace detail

class KeyValues {
 public:
  static KeyValues parse(std::string_view text) {
    KeyValues kv;
    std::string section;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      std::string t = detail::trim(line);
      if (t.empty()) continue;
      if (t.front() == '[') {
        if (t.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
        section = detail::trim(std::string_view(t).substr(1, t.size() - 2));
        continue;
      }
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
      std::string key = detail::trim(std::string_view(t).substr(0, eq));
      if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
      kv.set(section.empty() ? key : section + "." + key, detail::trim(std::string_view(t).substr(eq + 1)));
    }
    return kv;
  }

  static KeyValues load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key: " + key);
    return it->second;
  }

  double get_double(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t used = 0;
      double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": not a number: '" + v + "'");
    }
  }

  long long get_int(const std::string& key) const {
    const std::string& v = get(key);
    try {
      std::size_t used = 0;
      long long d = std::stoll(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("config key " + key + ": not an integer: '" + v + "'");
    }
  }

  bool get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key " + key + ": not a boolean: '" + v + "'");
  }

  // Comma-separated list of non-negative integers.
  std::vector<std::size_t> get_sizes(const std::string& key) const {
    std::vector<std::size_t> out;
    std::istringstream in(get(key));
    std::string item;
    while (std::getline(in, item, ',')) {
      std::string t = detail::trim(item);
      try {
        std::size_t used = 0;
        long long v = std::stoll(t, &used);
        if (used != t.size() || v < 0) throw std::invalid_argument(t);
        out.push_back(static_cast<std::size_t>(v));
      } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": bad list entry '" + t + "'");
      }
    }
    return out;
  }

  // Copies every key of `other` into this; keys this does not already have
  // are rejected.
  void merge_known(const KeyValues& other) {
    for (const auto& [k, v] : other.values_) {
      if (!has(k)) throw ConfigError("unknown config key: " + k);
      values_[k] = v;
    }
  }

  // "section.key=value"
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override must look like key=value: " + assignment);
    std::string key = detail::trim(std::string_view(assignment).substr(0, eq));
    if (!has(key)) throw ConfigError("unknown config key: " + key);
    set(key, detail::trim(std::string_view(assignment).substr(eq + 1)));
  }

  // Text form grouped by section; parse(dump()) reproduces the same keys.
  std::string dump() const {
    std::ostringstream os;
    std::string current;
    bool first = true;
    for (const auto& [k, v] : values_) {
      const auto dot = k.find('.');
      std::string section = dot == std::string::npos ? "" : k.substr(0, dot);
      std::string key = dot == std::string::npos ? k : k.substr(dot + 1);
      if (first || section != current) {
        if (!first) os << "\n";
        if (!section.empty()) os << "[" << section << "]\n";
        current = section;
        first = false;
      }
      os << key << " = " << v << "\n";
    }
    return os.str();
  }

  // Keys with the given section prefix ("model").
  KeyValues section(const std::string& name) const {
    KeyValues out;
    const std::string prefix = name + ".";
    for (const auto& [k, v] : values_) {
      if (k.rfind(prefix, 0) == 0) out.values_[k] = v;
    }
    return out;
  }

  const std::map<std::string, std::string>& items() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

template <class Range>
std::string join_list(const Range& values) {
  std::ostringstream os;
  bool first = true;
  for (const auto& v : values) {
    os << (first ? "" : ", ") << v;
    first = false;
  }
  return os.str();
}

// Shortest text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

}  // namespace deblur
