#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "maskattn/tensor.hpp"

namespace maskattn {

struct GradCheckOptions {
  double eps = 1e-5;
  // 0 checks every coordinate; otherwise an evenly strided subset per tensor.
  std::size_t max_coords_per_tensor = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
};

// Compares reverse-mode gradients of the scalar `f` against central finite
// differences for each leaf in `params` (which must require gradients).
// Error per coordinate is |analytic - numeric| / max(1, |numeric|).
// Throws OracleError when two evaluations of `f` disagree by more than 1e-12.
GradCheckReport finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                  GradCheckOptions options = {});

}  // namespace maskattn
