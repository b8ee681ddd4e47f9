#ifndef MCLAB_TENSOR_HPP
#define MCLAB_TENSOR_HPP

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mclab/common.hpp"

namespace mclab {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
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

/// Dense row-major n-d array handle. Copies share the underlying buffer, so a
/// tensor can sit both in a parameter store and on a tape node. The gradient
/// buffer is allocated on first touch and accumulates additively.
template <typename T>
class TensorBase {
 public:
  TensorBase() = default;

  static TensorBase zeros(Shape shape, bool requires_grad = false) {
    TensorBase t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->x.assign(shape_numel(t.impl_->shape), T(0));
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static TensorBase from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != shape_numel(shape))
      throw ShapeError(strf("tensor data length %zu does not match shape %s",
                            data.size(), shape_str(shape).c_str()));
    TensorBase t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->x = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static TensorBase scalar(T v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  int dim(std::size_t i) const { return impl_->shape[i]; }
  std::size_t numel() const { return impl_->x.size(); }

  std::span<T> data() { return impl_->x; }
  std::span<const T> data() const { return impl_->x; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  bool grad_allocated() const { return !impl_->g.empty(); }

  /// Gradient buffer, zero-initialized on first access.
  std::span<T> grad() {
    if (impl_->g.empty()) impl_->g.assign(impl_->x.size(), T(0));
    return impl_->g;
  }

  void zero_grad() {
    if (!impl_->g.empty()) impl_->g.assign(impl_->x.size(), T(0));
  }

  void drop_grad() { impl_->g.clear(); impl_->g.shrink_to_fit(); }

  T item() const {
    if (numel() != 1)
      throw ShapeError("item() requires a scalar tensor, got " + shape_str(shape()));
    return impl_->x[0];
  }

  /// Identity comparison (same buffer), not value comparison.
  bool same_as(const TensorBase& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> x;
    std::vector<T> g;
    bool requires_grad = false;
  };
  std::shared_ptr<Impl> impl_;
};

using Tensor = TensorBase<float>;
using DTensor = TensorBase<double>;

/// Reverse-mode tape. Operations append one node each in execution order,
/// which is a topological order of the data-flow graph by construction;
/// backward() replays the nodes once, in reverse.
template <typename T>
class TapeBase {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  std::size_t size() const { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded backward rule.
  void backward(TensorBase<T> loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward() requires a scalar loss, got " +
                       shape_str(loss.shape()));
    loss.grad()[0] += T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

using Tape = TapeBase<float>;
using DTape = TapeBase<double>;

}  // namespace mclab

#endif  // MCLAB_TENSOR_HPP
