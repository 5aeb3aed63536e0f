#pragma once

// Dense N-D tensor with a recording tape for reverse-mode differentiation.
//
// A Tensor is a reference-counted handle: copying a Tensor aliases the same
// storage. Ops never modify their inputs; the only in-place mutations are
// gradient accumulation during Tape::backward and optimizer updates on leaf
// parameters.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "deblur/error.hpp"

namespace deblur {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ")";
  return os.str();
}

template <class T>
class Tape;

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : s_(std::make_shared<Storage>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
    }
    s_->data.assign(shape_numel(shape), fill);
    s_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : Tensor(std::move(shape)) {
    if (values.size() != s_->data.size()) {
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(s_->shape));
    }
    s_->data = std::move(values);
  }

  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape()); }

  static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->data.size(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    s_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }
  // Allocates a zero gradient on first use. Const because the handle, not
  // the shared storage, is what const qualifies.
  std::span<T> grad_mut() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    return s_->grad;
  }
  void zero_grad() { s_->grad.clear(); }

  // Deep copy without tape history; requires_grad is preserved.
  Tensor clone() const {
    Tensor out(shape());
    std::copy(s_->data.begin(), s_->data.end(), out.s_->data.begin());
    out.s_->requires_grad = s_->requires_grad;
    return out;
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  const Tape<T>* producer() const { return s_->producer; }

 private:
  friend class Tape<T>;

  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    const Tape<T>* producer = nullptr;
  };

  std::shared_ptr<Storage> s_;
};

// Ordered record of executed differentiable ops. backward() replays the
// recorded closures in exact reverse order; gradients accumulate additively.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Marks `out` as produced on this tape and stores its backward closure.
  void record(Tensor<T>& out, std::function<void()> backward_fn) {
    out.s_->requires_grad = true;
    out.s_->producer = this;
    entries_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return entries_.size(); }

  void backward(Tensor<T>& loss) {
    if (consumed_) throw Error("backward called twice on the same tape without reset()");
    if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got " + shape_str(loss.shape()));
    if (loss.producer() != this) throw Error("loss was not recorded on this tape");
    consumed_ = true;
    loss.grad_mut()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

  // Drops all recorded history so the tape can be reused.
  void reset() {
    entries_.clear();
    consumed_ = false;
  }

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

template <class T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

// Installs a tape as the recording target for the current thread.
template <class T>
class TapeGuard {
 public:
  explicit TapeGuard(Tape<T>& tape) : previous_(active_tape<T>()) { active_tape<T>() = &tape; }
  ~TapeGuard() { active_tape<T>() = previous_; }
  TapeGuard(const TapeGuard&) = delete;
  TapeGuard& operator=(const TapeGuard&) = delete;

 private:
  Tape<T>* previous_;
};

// Disables recording for the current thread (inference, metrics).
template <class T>
class NoGradGuard {
 public:
  NoGradGuard() : previous_(active_tape<T>()) { active_tape<T>() = nullptr; }
  ~NoGradGuard() { active_tape<T>() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <class T, class... Ts>
Tape<T>* recording_tape(const Tensor<T>& first, const Ts&... rest) {
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) return nullptr;
  bool any = first.requires_grad();
  ((any = any || (rest.defined() && rest.requires_grad())), ...);
  return any ? tape : nullptr;
}

template <class T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

}  // namespace detail

}  // namespace deblur
