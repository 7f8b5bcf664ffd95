#include "maskattn/optim.hpp"

#include <cmath>

#include "maskattn/error.hpp"

namespace maskattn {

Adam::Adam(const ParameterSet& params, AdamOptions options) : options_(options) {
  for (const auto& p : params.items()) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
  }
}

void Adam::step(ParameterSet& params, double lr) {
  auto& items = params.items();
  if (items.size() != m_.size()) throw UsageError("optimizer built for a different parameter set");
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(options_.beta1, t);
  const double c2 = 1.0 - std::pow(options_.beta2, t);
  for (std::size_t i = 0; i < items.size(); ++i) {
    Tensor& w = items[i].tensor;
    // A parameter the loss never reached has a zero gradient.
    const bool has_grad = w.has_grad();
    const auto g = w.grad();
    auto data = w.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < data.size(); ++k) {
      const double gk = has_grad ? g[k] : 0.0;
      m[k] = options_.beta1 * m[k] + (1.0 - options_.beta1) * gk;
      v[k] = options_.beta2 * v[k] + (1.0 - options_.beta2) * gk * gk;
      data[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + options_.eps);
    }
  }
  params.clamp_to_bounds();
}

}  // namespace maskattn
