#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "deblur/error.hpp"
#include "deblur/tensor.hpp"

namespace deblur {

enum class Init { kTruncNormal, kZeros, kOnes, kConstant };

// Declared shape and initializer of one learnable tensor.
struct ParamSpec {
  std::string name;
  Shape shape;
  Init init = Init::kTruncNormal;
  double value = 0.0;  // for Init::kConstant
};

inline constexpr double kInitStd = 0.02;

// Named learnable tensors of one model instance. Iteration is in name order.
template <class T>
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void add(const std::string& name, Tensor<T> tensor) {
    tensor.set_requires_grad(true);
    if (!tensors_.emplace(name, std::move(tensor)).second) throw ConfigError("duplicate parameter name: " + name);
  }

  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  Tensor<T>& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

  std::size_t size() const { return tensors_.size(); }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : tensors_) t.zero_grad();
  }

  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }
  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }

  // Deep copy: the result shares no storage with this store.
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, t] : tensors_) out.add(name, t.clone());
    return out;
  }

 private:
  Map tensors_;
};

// Allocates and initializes every spec. Random draws happen in name order so
// the result depends only on (specs, seed). Weights use a normal with std
// 0.02 truncated at two standard deviations.
template <class T>
ParamStore<T> initialize(std::vector<ParamSpec> specs, std::uint64_t seed) {
  std::sort(specs.begin(), specs.end(), [](const ParamSpec& a, const ParamSpec& b) { return a.name < b.name; });
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  ParamStore<T> store;
  for (const auto& spec : specs) {
    Tensor<T> t(spec.shape);
    switch (spec.init) {
      case Init::kTruncNormal:
        for (T& v : t.data()) {
          double z;
          do {
            z = normal(rng);
          } while (std::abs(z) > 2.0);
          v = static_cast<T>(z * kInitStd);
        }
        break;
      case Init::kZeros:
        break;
      case Init::kOnes:
        for (T& v : t.data()) v = T(1);
        break;
      case Init::kConstant:
        for (T& v : t.data()) v = static_cast<T>(spec.value);
        break;
    }
    store.add(spec.name, std::move(t));
  }
  return store;
}

// Converts between precisions (used by gradient checks and checkpoints).
template <class To, class From>
ParamStore<To> cast_params(const ParamStore<From>& src) {
  ParamStore<To> out;
  for (const auto& [name, t] : src) {
    Tensor<To> c(t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) c[i] = static_cast<To>(t[i]);
    out.add(name, std::move(c));
  }
  return out;
}

}  // namespace deblur
