#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace maskattn {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  // Empty until the tensor first receives a gradient.
  std::vector<double> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  // Tape generation in which this tensor was produced by a recorded op.
  // Zero for leaves and for tensors produced without recording.
  std::uint64_t generation = 0;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using ImplPtr = std::shared_ptr<TensorImpl>;

}  // namespace detail

// Dense row-major array of doubles. Copies share storage; values produced by
// ops are never mutated afterwards, so a Tensor behaves like a value.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  double operator[](std::size_t i) const { return data()[i]; }
  double item() const;

  // Gradient accumulated by the last backward passes; empty span when the
  // tensor never received one.
  std::span<const double> grad() const;
  bool has_grad() const;
  bool requires_grad() const;
  bool is_leaf() const;

  // In-place access for leaves only (parameters, optimizer updates).
  std::span<double> mutable_data();
  void zero_grad();

  // Same values, cut from any recorded graph.
  Tensor detach() const;
  Tensor clone() const;

  const detail::ImplPtr& impl() const { return impl_; }
  explicit Tensor(detail::ImplPtr impl) : impl_(std::move(impl)) {}

 private:
  detail::ImplPtr impl_;
};

// Receives the output (with its gradient) and must add into input gradients.
using BackwardFn = std::function<void(const detail::TensorImpl& out)>;

// Thread-local tape of recorded ops in creation (hence topological) order.
class Graph {
 public:
  static Graph& active();

  bool recording() const { return enabled_; }
  std::uint64_t generation() const { return generation_; }
  std::size_t size() const { return nodes_.size(); }

  // Drops all recorded nodes without propagating gradients.
  void reset();

  // Builds an op output. When recording is enabled and any input requires a
  // gradient, the output is attached to the tape with `backward`.
  Tensor record(Shape shape, std::vector<double> data,
                std::initializer_list<const Tensor*> inputs, BackwardFn backward);
  Tensor record(Shape shape, std::vector<double> data,
                const std::vector<const Tensor*>& inputs, BackwardFn backward);

  void backward(const Tensor& loss);

 private:
  friend class NoGradGuard;
  struct Node {
    detail::ImplPtr out;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  std::uint64_t generation_ = 1;
  bool enabled_ = true;
};

// Disables recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Propagates d(loss)/d(x) for every recorded tensor reachable from `loss`,
// accumulating into leaf gradients, then clears the tape. `loss` must be a
// one-element tensor recorded on the current tape.
void backward(const Tensor& loss);

// Gradient buffer of an input, or nullptr when it does not take gradients.
inline double* grad_target(const detail::ImplPtr& impl) {
  return impl->requires_grad ? impl->grad_buffer().data() : nullptr;
}

}  // namespace maskattn
