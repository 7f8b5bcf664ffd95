#include "maskattn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "maskattn/error.hpp"

namespace maskattn {

namespace {

double evaluate(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  const Tensor out = f();
  if (out.numel() != 1) throw UsageError("finite_diff_check: f must return a scalar");
  return out.item();
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                  GradCheckOptions options) {
  if (!(options.eps > 0.0)) throw ConfigError("finite_diff_check: eps must be positive");
  for (const auto& p : params) {
    if (!p.requires_grad() || !p.is_leaf()) {
      throw UsageError("finite_diff_check: every checked tensor must be a gradient-enabled leaf");
    }
  }

  const double first = evaluate(f);
  const double second = evaluate(f);
  if (std::abs(first - second) > 1e-12) {
    throw OracleError("finite_diff_check: f is not deterministic (" + std::to_string(first) +
                      " vs " + std::to_string(second) + ")");
  }

  for (auto& p : params) p.zero_grad();
  Graph::active().reset();
  backward(f());

  GradCheckReport report;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& p = params[t];
    const std::vector<double> analytic = p.has_grad()
                                             ? std::vector<double>(p.grad().begin(), p.grad().end())
                                             : std::vector<double>(p.numel(), 0.0);
    const std::size_t n = p.numel();
    std::size_t step = 1;
    if (options.max_coords_per_tensor > 0 && n > options.max_coords_per_tensor) {
      step = (n + options.max_coords_per_tensor - 1) / options.max_coords_per_tensor;
    }
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < n; i += step) {
      const double saved = values[i];
      values[i] = saved + options.eps;
      const double plus = evaluate(f);
      values[i] = saved - options.eps;
      const double minus = evaluate(f);
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
      ++report.coords_checked;
      if (err > report.max_rel_error || report.coords_checked == 1) {
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.worst_tensor = t;
        report.worst_coord = i;
        report.analytic = analytic[i];
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace maskattn
