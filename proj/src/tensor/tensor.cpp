#include "maskattn/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "maskattn/error.hpp"

namespace maskattn {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

namespace {

void check_shape(const Shape& shape, std::size_t size) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_to_string(shape));
  }
  if (shape_numel(shape) != size) {
    throw DimensionError("shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(size) + " values");
  }
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  check_shape(shape, data.size());
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!impl_) throw UsageError("use of an undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_to_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  shape();
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_to_string(shape()));
  return impl_->data[0];
}

std::span<const double> Tensor::grad() const {
  shape();
  return impl_->grad;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }
bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
bool Tensor::is_leaf() const { return !impl_ || impl_->is_leaf; }

std::span<double> Tensor::mutable_data() {
  shape();
  if (!impl_->is_leaf) throw UsageError("in-place modification of a non-leaf tensor");
  return impl_->data;
}

void Tensor::zero_grad() {
  if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  shape();
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor copy = detach();
  copy.impl_->requires_grad = impl_->requires_grad && impl_->is_leaf;
  return copy;
}

// ---------------------------------------------------------------------------

Graph& Graph::active() {
  thread_local Graph graph;
  return graph;
}

void Graph::reset() {
  nodes_.clear();
  ++generation_;
}

Tensor Graph::record(Shape shape, std::vector<double> data,
                     std::initializer_list<const Tensor*> inputs, BackwardFn backward) {
  return record(std::move(shape), std::move(data), std::vector<const Tensor*>(inputs),
                std::move(backward));
}

Tensor Graph::record(Shape shape, std::vector<double> data,
                     const std::vector<const Tensor*>& inputs, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!enabled_) return out;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor* t) { return t->requires_grad(); });
  if (!needs) return out;
  auto& impl = *out.impl();
  impl.requires_grad = true;
  impl.is_leaf = false;
  impl.generation = generation_;
  nodes_.push_back({out.impl(), std::move(backward)});
  return out;
}

void Graph::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw UsageError("backward needs a scalar loss, got shape " + shape_to_string(loss.shape()));
  }
  const auto& root = loss.impl();
  if (!root->requires_grad || root->is_leaf || root->generation != generation_) {
    throw UsageError("loss is not connected to the active graph (already consumed or not recorded)");
  }
  root->grad_buffer()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->out->grad.empty()) continue;  // not on a path to the loss
    it->backward(*it->out);
  }
  reset();
}

void backward(const Tensor& loss) { Graph::active().backward(loss); }

NoGradGuard::NoGradGuard() : previous_(Graph::active().enabled_) {
  Graph::active().enabled_ = false;
}

NoGradGuard::~NoGradGuard() { Graph::active().enabled_ = previous_; }

}  // namespace maskattn
