// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with a gradient slot, and the tape that records operations
// for reverse-mode differentiation.
#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cmr/errors.hpp"

namespace cmr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Shared handle to a dense row-major array. Copies alias the same storage;
/// operations never modify their inputs and always return fresh tensors.
/// Only initializers and the optimizer write through mutable_values().
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    for (auto extent : shape) {
      if (extent == 0) {
        throw DimensionError("tensor extents must be positive, got " +
                             shape_str(shape));
      }
    }
    if (shape.empty()) shape = {1};
    if (values.size() != shape_numel(shape)) {
      throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) +
                           " values, got " + std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->values = std::move(values);
    impl_->requires_grad = requires_grad;
  }

  explicit Tensor(Shape shape, bool requires_grad = false)
      : Tensor(shape, std::vector<T>(shape_numel(shape.empty() ? Shape{1} : shape)),
               requires_grad) {}

  static Tensor scalar(T value) { return Tensor(Shape{1}, std::vector<T>{value}); }

  static Tensor vector(std::vector<T> values) {
    const auto n = values.size();
    return Tensor(Shape{n}, std::move(values));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<T> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<T> values;
    values.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged matrix literal");
      values.insert(values.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(values));
  }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl().shape; }
  std::size_t rank() const { return impl().shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl().shape.at(axis); }
  std::size_t numel() const { return impl().values.size(); }
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  std::span<const T> values() const { return impl().values; }
  std::span<T> mutable_values() const { return impl().values; }
  const std::vector<T>& data() const { return impl().values; }

  T operator[](std::size_t i) const { return impl().values[i]; }
  T at(std::size_t r, std::size_t c) const {
    return impl().values[r * impl().shape[1] + c];
  }
  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl().values[0];
  }

  bool requires_grad() const { return impl().requires_grad; }
  void set_requires_grad(bool flag) const { impl().requires_grad = flag; }

  bool has_grad() const { return !impl().grad.empty(); }
  std::span<const T> grad() const { return impl().grad; }
  /// Gradient slot, zero-filled on first access. The slot is not part of the
  /// tensor's value, so it stays writable through const handles.
  std::span<T> grad_buffer() const {
    auto& g = impl().grad;
    if (g.empty()) g.assign(impl().values.size(), T{0});
    return g;
  }
  void zero_grad() const { impl().grad.clear(); }

  const void* id() const noexcept { return impl_.get(); }
  bool same(const Tensor& other) const noexcept { return impl_ == other.impl_; }

  /// Value copy without gradient history.
  Tensor detach() const { return Tensor(shape(), impl().values); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    std::transform(impl().values.begin(), impl().values.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape(), std::move(out));
  }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> values;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  Impl& impl() const {
    if (!impl_) throw ContractError("use of an undefined tensor");
    return *impl_;
  }

  std::shared_ptr<Impl> impl_;
};

template <typename T>
class TapeScope;
template <typename T>
class NoGradScope;

/// Ordered record of differentiable operations. Operations append
/// themselves while the tape is active on the current thread; backward()
/// replays them once in reverse order.
template <typename T>
class Tape {
 public:
  struct Record {
    const char* op;
    std::vector<const void*> inputs;
    const void* output;
    std::function<void()> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() noexcept { return current_; }

  void record(const char* op, std::initializer_list<const Tensor<T>*> inputs,
              const Tensor<T>& output, std::function<void()> backward) {
    std::vector<const void*> ids;
    ids.reserve(inputs.size());
    for (const auto* t : inputs) ids.push_back(t->id());
    records_.push_back(Record{op, std::move(ids), output.id(), std::move(backward)});
  }

  void record(const char* op, const std::vector<Tensor<T>>& inputs,
              const Tensor<T>& output, std::function<void()> backward) {
    std::vector<const void*> ids;
    ids.reserve(inputs.size());
    for (const auto& t : inputs) ids.push_back(t.id());
    records_.push_back(Record{op, std::move(ids), output.id(), std::move(backward)});
  }

  /// Seeds d(root)/d(root) = seed and propagates to every recorded input.
  /// Gradients accumulate into existing slots, so parameters shared across
  /// several tapes collect the sum.
  void backward(const Tensor<T>& root, T seed = T{1}) {
    if (consumed_) throw ContractError("tape already ran its backward pass");
    if (root.numel() != 1) {
      throw ContractError("backward root must be scalar, got shape " +
                          shape_str(root.shape()));
    }
    consumed_ = true;
    root.grad_buffer()[0] += seed;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      it->backward();
      ++visited_;
    }
    records_.clear();
  }

  std::size_t size() const noexcept { return records_.size(); }
  std::size_t visited() const noexcept { return visited_; }
  std::span<const Record> records() const noexcept { return records_; }

 private:
  friend class TapeScope<T>;
  friend class NoGradScope<T>;
  static inline thread_local Tape* current_ = nullptr;
  std::vector<Record> records_;
  std::size_t visited_ = 0;
  bool consumed_ = false;
};

/// Makes a tape the recording target for the current thread.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::current_) {
    Tape<T>::current_ = &tape;
  }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  ~TapeScope() { Tape<T>::current_ = previous_; }

 private:
  Tape<T>* previous_;
};

/// Suspends recording, e.g. for finite-difference re-evaluation.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::current_) { Tape<T>::current_ = nullptr; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;
  ~NoGradScope() { Tape<T>::current_ = previous_; }

 private:
  Tape<T>* previous_;
};

}  // namespace cmr
