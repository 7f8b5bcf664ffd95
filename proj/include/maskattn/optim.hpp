#pragma once

#include <cstddef>
#include <vector>

#include "maskattn/params.hpp"

namespace maskattn {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam. After each step every parameter is clamped to its
// lower bound, which keeps the attention mask scales positive.
class Adam {
 public:
  explicit Adam(const ParameterSet& params, AdamOptions options = {});

  void step(ParameterSet& params, double lr);
  std::size_t steps() const { return steps_; }

 private:
  AdamOptions options_;
  std::size_t steps_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace maskattn
