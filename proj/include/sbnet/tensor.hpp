#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sbnet {

using Shape = std::vector<std::size_t>;

/// Raised when operand shapes are incompatible.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first adjoint touches this node
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tape;

namespace detail {
template <typename T>
inline Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace detail

/// Shared handle to a dense row-major buffer. Copies alias the same storage;
/// use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : node_(std::make_shared<TensorNode<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : node_(std::make_shared<TensorNode<T>>()) {
    node_->data.assign(numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> data)
      : node_(std::make_shared<TensorNode<T>>()) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= rank()) throw ShapeError("axis out of range for " + to_string(shape()));
    return node_->shape[axis];
  }
  std::size_t size() const { return node_->data.size(); }

  std::span<T> data() { return node_->data; }
  std::span<const T> data() const { return node_->data; }
  T& operator[](std::size_t i) { return node_->data[i]; }
  const T& operator[](std::size_t i) const { return node_->data[i]; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<T> grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  std::span<const T> grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool value = true) {
    node_->requires_grad = value;
    return *this;
  }

  T item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return node_->data[0];
  }

  /// Deep copy detached from any tape.
  Tensor clone() const { return Tensor(shape(), node_->data); }

  /// Copy with no tape link; gradients stop here.
  Tensor detach() const { return clone(); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape(), std::vector<U>(node_->data.begin(), node_->data.end()));
  }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of executed primitives. Replaying it in reverse applies
/// each adjoint exactly once.
template <typename T>
class Tape {
 public:
  struct Entry {
    std::shared_ptr<TensorNode<T>> output;
    std::function<void()> adjoint;
  };

  void record(std::shared_ptr<TensorNode<T>> output, std::function<void()> adjoint) {
    entries_.push_back({std::move(output), std::move(adjoint)});
  }

  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  /// Fills grad of every requires_grad tensor reachable from loss.
  void backward(Tensor<T>& loss) {
    if (loss.size() != 1 || loss.rank() > 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad()) return;
    loss.grad()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (it->output->grad.empty()) continue;  // not on a path from the loss
      it->adjoint();
    }
  }

 private:
  std::vector<Entry> entries_;
};

template <typename T>
void backward(Tensor<T>& loss, Tape<T>& tape) {
  tape.backward(loss);
}

/// Routes primitives executed on this thread into `tape` for its lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(detail::active_tape<T>()) {
    detail::active_tape<T>() = &tape;
  }
  ~TapeScope() { detail::active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording (evaluation, finite differences).
template <typename T>
class NoTapeScope {
 public:
  NoTapeScope() : previous_(detail::active_tape<T>()) { detail::active_tape<T>() = nullptr; }
  ~NoTapeScope() { detail::active_tape<T>() = previous_; }
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <typename T, typename... Ts>
bool any_requires_grad(const Tensor<T>& first, const Ts&... rest) {
  return first.requires_grad() || (rest.requires_grad() || ...);
}

/// Allocates an output tensor; it joins the tape when recording is on and an
/// input needs a gradient.
template <typename T, typename... Inputs>
Tensor<T> make_output(Shape shape, const Inputs&... inputs) {
  Tensor<T> out(std::move(shape));
  if (active_tape<T>() != nullptr && any_requires_grad(inputs...)) out.set_requires_grad();
  return out;
}

template <typename T>
bool recording(const Tensor<T>& out) {
  return out.requires_grad() && active_tape<T>() != nullptr;
}

template <typename T>
void record(const Tensor<T>& out, std::function<void()> adjoint) {
  active_tape<T>()->record(out.node(), std::move(adjoint));
}

}  // namespace detail

}  // namespace sbnet
