#include "maskattn/params.hpp"

#include <algorithm>
#include <cmath>

#include "maskattn/error.hpp"

namespace maskattn {

Tensor ParameterSet::add(std::string name, Tensor value, double lower_bound) {
  if (find(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  if (!value.requires_grad() || !value.is_leaf()) {
    throw UsageError("parameter '" + name + "' must be a gradient-enabled leaf");
  }
  items_.push_back({std::move(name), value, lower_bound});
  return value;
}

const Parameter* ParameterSet::find(const std::string& name) const {
  auto it = std::find_if(items_.begin(), items_.end(),
                         [&](const Parameter& p) { return p.name == name; });
  return it == items_.end() ? nullptr : &*it;
}

const Parameter& ParameterSet::get(const std::string& name) const {
  if (const auto* p = find(name)) return *p;
  throw UsageError("unknown parameter '" + name + "'");
}

void ParameterSet::zero_grad() {
  for (auto& p : items_) p.tensor.zero_grad();
}

std::size_t ParameterSet::total_values() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.tensor.numel();
  return n;
}

double ParameterSet::grad_norm() const {
  double acc = 0.0;
  for (const auto& p : items_)
    for (double g : p.tensor.grad()) acc += g * g;
  return std::sqrt(acc);
}

void ParameterSet::clamp_to_bounds() {
  for (auto& p : items_) {
    if (!std::isfinite(p.lower_bound)) continue;
    for (auto& v : p.tensor.mutable_data()) v = std::max(v, p.lower_bound);
  }
}

Tensor uniform_init(const Shape& shape, double bound, Rng& rng) {
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = rng.symmetric(bound);
  return Tensor(shape, std::move(values), true);
}

}  // namespace maskattn
