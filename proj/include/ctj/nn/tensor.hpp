#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "ctj/error.hpp"

namespace ctj::nn {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
/// Over-aligned allocator whose sized construction leaves scalars
/// uninitialized; ops overwrite every output entry.
template <class T>
struct BufferAllocator : Eigen::aligned_allocator<T> {
  template <class U>
  struct rebind {
    using other = BufferAllocator<U>;
  };
  BufferAllocator() = default;
  template <class U>
  BufferAllocator(const BufferAllocator<U>&) noexcept {}

  template <class U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

template <class T, class U>
bool operator==(const BufferAllocator<T>&, const BufferAllocator<U>&) noexcept {
  return true;
}

/// Tensor storage. Alignment is fixed so vectorized kernels peel identically
/// on every allocation, which keeps results bitwise reproducible.
template <class T>
using Buffer = std::vector<T, BufferAllocator<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

inline std::uint64_t next_order() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
  ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

template <class T>
struct Node {
  Buffer<T> value;
  Buffer<T> grad;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool requires_grad = false;
  std::uint64_t order = detail::next_order();
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  T* grad_data() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

/// Shared handle to a 2-D row-major array that may take part in a gradient
/// graph. Copies alias the same storage.
template <class T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(std::size_t rows, std::size_t cols) {
    return from(rows, cols, Buffer<T>(rows * cols, T(0)));
  }

  static Tensor from(std::size_t rows, std::size_t cols, const std::vector<T>& values) {
    return from(rows, cols, Buffer<T>(values.begin(), values.end()));
  }

  static Tensor from(std::size_t rows, std::size_t cols, std::initializer_list<T> values) {
    return from(rows, cols, Buffer<T>(values));
  }

  static Tensor from(std::size_t rows, std::size_t cols, Buffer<T> values) {
    require(values.size() == rows * cols, "shape_mismatch", "tensor value count does not match shape");
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(values);
    return Tensor(std::move(n));
  }

  /// Trainable leaf.
  static Tensor parameter(std::size_t rows, std::size_t cols, const std::vector<T>& values) {
    auto t = from(rows, cols, values);
    t.node_->requires_grad = true;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  std::size_t rows() const { return node_->rows; }
  std::size_t cols() const { return node_->cols; }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  T* data() { return node_->value.data(); }
  const T* data() const { return node_->value.data(); }
  Buffer<T>& values() { return node_->value; }
  const Buffer<T>& values() const { return node_->value; }
  T& at(std::size_t r, std::size_t c) { return node_->value[r * cols() + c]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  T item() const {
    require(size() == 1, "shape_mismatch", "item() on a non-scalar tensor");
    return node_->value[0];
  }

  /// Gradient buffer (allocated on first access).
  Buffer<T>& grad() {
    node_->grad_data();
    return node_->grad;
  }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  MatMap<T> mat() { return MatMap<T>(data(), rows(), cols()); }
  ConstMatMap<T> mat() const { return ConstMatMap<T>(data(), rows(), cols()); }

  /// Value copy cut from the graph.
  Tensor detach() const { return from(rows(), cols(), node_->value); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

  /// Reverse-mode sweep from this scalar. Gradients accumulate into every
  /// reachable node that requires them.
  void backward() {
    require(size() == 1, "shape_mismatch", "backward() needs a scalar output");
    std::vector<Node<T>*> order;
    std::vector<Node<T>*> stack{node_.get()};
    std::unordered_set<Node<T>*> seen;
    while (!stack.empty()) {
      auto* n = stack.back();
      stack.pop_back();
      if (!seen.insert(n).second) continue;
      order.push_back(n);
      for (auto& p : n->parents) stack.push_back(p.get());
    }
    // Creation indices are monotone, so descending order is a valid reverse
    // topological order.
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->order > b->order; });
    node_->grad_data()[0] += T(1);
    for (auto* n : order) {
      if (n->backward_fn) {
        n->grad_data();
        n->backward_fn(*n);
      }
    }
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates an op output. When graph recording is on and any input requires a
/// gradient, the result links to its inputs and keeps `backward`.
template <class T, class Backward>
Tensor<T> make_result(std::size_t rows, std::size_t cols, Buffer<T> value,
                      std::initializer_list<Tensor<T>> inputs, Backward&& backward) {
  auto n = std::make_shared<Node<T>>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(value);
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      n->requires_grad = true;
      for (const auto& in : inputs)
        if (in.requires_grad()) n->parents.push_back(in.node_ptr());
      n->backward_fn = std::forward<Backward>(backward);
    }
  }
  return Tensor<T>(std::move(n));
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  for (auto v : t.values())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace ctj::nn
