#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "simplexdiff/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace simplexdiff {

/// Keeps large tensor buffers on the heap instead of fresh mmap pages. Tapes
/// allocate and free the same sizes every step; without this glibc returns
/// them to the OS and every step pays the page faults again.
inline void tune_allocator() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major tensor. `grad` is empty until a backward pass writes it.
template <class T>
struct Tensor {
  using value_type = T;

  Shape shape;
  std::vector<T> values;
  bool requires_grad = false;
  std::vector<T> grad;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0))
      : shape(std::move(s)), values(numel(shape), fill) {}
  Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != numel(shape)) {
      fail(ErrorKind::dimension, "tensor of shape " + shape_str(shape) +
                                     " given " + std::to_string(values.size()) +
                                     " values");
    }
  }

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  std::size_t rows() const { return shape.empty() ? 1 : shape.front(); }
  std::size_t cols() const { return shape.empty() ? 1 : size() / rows(); }

  bool has_grad() const { return !grad.empty(); }
  void zero_grad() { grad.assign(values.size(), T(0)); }
  void clear_grad() { grad.clear(); }

  T& operator[](std::size_t i) { return values[i]; }
  const T& operator[](std::size_t i) const { return values[i]; }
  T& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  T item() const {
    if (values.size() != 1) {
      fail(ErrorKind::dimension, "item() on tensor of shape " + shape_str(shape));
    }
    return values.front();
  }

  bool all_finite() const {
    for (const T& v : values) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.values.assign(values.begin(), values.end());
    return out;
  }
};

template <class T>
class Tape;

/// Handle to a tensor recorded on a Tape.
template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape; }
  bool requires_grad() const { return tape->requires_grad(id); }
};

/// Define-by-run reverse-mode tape. Nodes are appended in execution order, so
/// the node list is always topologically sorted; backward walks it in reverse.
///
/// Parameters enter through `param()`, which records a non-owning reference:
/// gradients accumulate directly into the parameter tensor's `grad`. Values
/// that do not need gradients enter through `constant()`.
template <class T>
class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> param(Tensor<T>& tensor) {
    nodes_.push_back(Node{&tensor, &tensor, tensor.requires_grad, {}});
    return {this, nodes_.size() - 1};
  }

  /// Read-only reference; never accumulates a gradient.
  Var<T> param(const Tensor<T>& tensor) {
    nodes_.push_back(Node{&tensor, nullptr, false, {}});
    return {this, nodes_.size() - 1};
  }

  Var<T> constant(Tensor<T> tensor) {
    tensor.requires_grad = false;
    owned_.push_back(std::move(tensor));
    nodes_.push_back(Node{&owned_.back(), &owned_.back(), false, {}});
    return {this, nodes_.size() - 1};
  }

  /// Owned leaf that may require a gradient (read back via `grad()`).
  Var<T> leaf(Tensor<T> tensor, bool requires_grad) {
    tensor.requires_grad = requires_grad;
    owned_.push_back(std::move(tensor));
    nodes_.push_back(Node{&owned_.back(), &owned_.back(), requires_grad, {}});
    return {this, nodes_.size() - 1};
  }

  /// Records an op result. `backward` runs only if some input requires grad.
  Var<T> record(Tensor<T> out, bool requires_grad, Backward backward) {
    out.requires_grad = requires_grad;
    owned_.push_back(std::move(out));
    nodes_.push_back(Node{&owned_.back(), &owned_.back(), requires_grad,
                          requires_grad ? std::move(backward) : Backward{}});
    ++op_count_;
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return *nodes_.at(id).read; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer of node `id`, zero-allocated on first use. Only valid for
  /// nodes that require grad.
  std::vector<T>& grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.write->grad.size() != n.write->values.size()) {
      n.write->grad.assign(n.write->values.size(), T(0));
    }
    return n.write->grad;
  }

  /// Gradient flowing into node `id` during backward; empty if none arrived.
  const std::vector<T>& upstream(std::size_t id) const { return nodes_.at(id).read->grad; }

  const std::vector<T>& grad(Var<T> v) const { return upstream(v.id); }

  std::size_t size() const { return nodes_.size(); }
  std::size_t op_count() const { return op_count_; }
  bool backward_done() const { return backward_done_; }

  void backward(Var<T> loss) {
    if (loss.tape != this) fail(ErrorKind::usage, "loss belongs to a different tape");
    if (backward_done_) {
      fail(ErrorKind::usage, "backward already ran on this tape; call reset() first");
    }
    const Tensor<T>& l = value(loss.id);
    if (l.size() != 1) {
      fail(ErrorKind::dimension, "backward needs a scalar loss, got " + shape_str(l.shape));
    }
    backward_done_ = true;
    if (!requires_grad(loss.id)) return;
    grad_buffer(loss.id)[0] += T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward) continue;
      if (n.read->grad.empty()) continue;
      n.backward(*this);
    }
  }

  /// Drops all recorded nodes. Parameter gradients are left untouched.
  void reset() {
    nodes_.clear();
    owned_.clear();
    backward_done_ = false;
    op_count_ = 0;
  }

 private:
  struct Node {
    const Tensor<T>* read;
    Tensor<T>* write;
    bool requires_grad;
    Backward backward;
  };

  std::deque<Tensor<T>> owned_;
  std::vector<Node> nodes_;
  bool backward_done_ = false;
  std::size_t op_count_ = 0;
};

}  // namespace simplexdiff
