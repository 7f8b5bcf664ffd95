#pragma once

#include <limits>
#include <string>
#include <vector>

#include "maskattn/rng.hpp"
#include "maskattn/tensor.hpp"

namespace maskattn {

struct Parameter {
  std::string name;
  Tensor tensor;
  // Values are clamped to at least this after every optimizer step.
  double lower_bound = -std::numeric_limits<double>::infinity();
};

// Ordered registry of the learnable tensors of a model. Registration order is
// the checkpoint order.
class ParameterSet {
 public:
  Tensor add(std::string name, Tensor value,
             double lower_bound = -std::numeric_limits<double>::infinity());

  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }
  const Parameter* find(const std::string& name) const;
  const Parameter& get(const std::string& name) const;

  void zero_grad();
  std::size_t total_values() const;
  // L2 norm over all parameter gradients.
  double grad_norm() const;
  void clamp_to_bounds();

 private:
  std::vector<Parameter> items_;
};

// Uniform(-bound, bound) initialized gradient-enabled tensor.
Tensor uniform_init(const Shape& shape, double bound, Rng& rng);

}  // namespace maskattn
