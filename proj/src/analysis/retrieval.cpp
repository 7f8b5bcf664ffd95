#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "maskattn/analysis.hpp"
#include "maskattn/error.hpp"
#include "maskattn/key_value.hpp"
#include "maskattn/rng.hpp"

namespace maskattn {

Tensor descriptor_distances(const Tensor& descriptors) {
  if (descriptors.rank() != 2) {
    throw DimensionError("descriptor_distances: expected [N x C], got " +
                         shape_to_string(descriptors.shape()));
  }
  const std::size_t n = descriptors.dim(0), c = descriptors.dim(1);
  std::vector<double> out(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        const double d = descriptors[i * c + k] - descriptors[j * c + k];
        s += d * d;
      }
      out[i * n + j] = out[j * n + i] = std::sqrt(s);
    }
  return Tensor({n, n}, std::move(out));
}

PRCurve pr_curve(const Tensor& distances, const std::vector<int>& labels) {
  const std::size_t n = labels.size();
  if (distances.rank() != 2 || distances.dim(0) != n || distances.dim(1) != n) {
    throw DimensionError("pr_curve: distances " + shape_to_string(distances.shape()) + " for " +
                         std::to_string(n) + " labels");
  }
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];

  PRCurve curve;
  constexpr std::size_t kLevels = 21;
  for (std::size_t i = 0; i < kLevels; ++i) curve.recall.push_back(static_cast<double>(i) / 20.0);
  curve.precision.assign(kLevels, 0.0);

  for (std::size_t q = 0; q < n; ++q) {
    const std::size_t positives = counts[labels[q]] - 1;
    if (positives == 0) {
      ++curve.singletons_excluded;
      continue;
    }
    std::vector<std::size_t> order;
    for (std::size_t j = 0; j < n; ++j)
      if (j != q) order.push_back(j);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return distances[q * n + a] < distances[q * n + b];
    });
    // Precision at each rank, then the running maximum from the tail gives
    // the interpolated precision for every recall level.
    std::vector<double> prec(order.size()), rec(order.size());
    std::size_t hits = 0;
    for (std::size_t k = 0; k < order.size(); ++k) {
      hits += labels[order[k]] == labels[q];
      prec[k] = static_cast<double>(hits) / static_cast<double>(k + 1);
      rec[k] = static_cast<double>(hits) / static_cast<double>(positives);
    }
    for (std::size_t level = 0; level < kLevels; ++level) {
      double best = 0.0;
      for (std::size_t k = 0; k < order.size(); ++k)
        if (rec[k] >= curve.recall[level] - 1e-12) best = std::max(best, prec[k]);
      curve.precision[level] += best;
    }
    ++curve.queries;
  }
  if (curve.queries == 0) throw ContractError("pr_curve: every instance has a single descriptor");
  for (double& p : curve.precision) p /= static_cast<double>(curve.queries);
  return curve;
}

namespace {

// Unit start vector orthogonal to the already found components, or an empty
// vector when none is left.
std::vector<double> start_vector(std::size_t c, const std::vector<std::vector<double>>& found,
                                 std::size_t attempt) {
  std::vector<double> v(c);
  Rng rng(derive_seed(0x5eed, "pca-start", attempt));
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& u : found) {
      const double d = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
      for (std::size_t k = 0; k < c; ++k) v[k] -= d * u[k];
    }
  const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
  if (norm < 1e-8) return {};
  for (double& x : v) x /= norm;
  return v;
}

}  // namespace

PcaResult pca_project(const Tensor& descriptors, std::size_t dims, double tol,
                      std::size_t max_iters) {
  if (descriptors.rank() != 2) {
    throw DimensionError("pca_project: expected [N x C], got " + shape_to_string(descriptors.shape()));
  }
  const std::size_t n = descriptors.dim(0), c = descriptors.dim(1);
  if (dims == 0 || n < dims || c < dims) {
    throw DimensionError("pca_project: cannot take " + std::to_string(dims) + " components of " +
                         shape_to_string(descriptors.shape()));
  }
  PcaResult out;
  out.mean.assign(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) out.mean[k] += descriptors[i * c + k];
  for (double& m : out.mean) m /= static_cast<double>(n);
  std::vector<double> centered(n * c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < c; ++k) centered[i * c + k] = descriptors[i * c + k] - out.mean[k];

  const double divisor = n > 1 ? static_cast<double>(n - 1) : 1.0;
  std::vector<double> cov(c * c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = 0; b < c; ++b) cov[a * c + b] += centered[i * c + a] * centered[i * c + b];
  for (double& v : cov) v /= divisor;
  double trace = 0.0;
  for (std::size_t a = 0; a < c; ++a) trace += cov[a * c + a];
  // Residuals are measured against the total variance.
  const double scale = std::max(trace, 1e-300);

  std::vector<std::vector<double>> found;
  std::vector<double> work = cov, mv(c);
  for (std::size_t comp = 0; comp < dims; ++comp) {
    std::vector<double> v;
    for (std::size_t attempt = 0; v.empty(); ++attempt) v = start_vector(c, found, attempt);
    double lambda = 0.0, residual = INFINITY;
    std::size_t it = 0;
    for (; it < max_iters; ++it) {
      for (std::size_t a = 0; a < c; ++a) {
        double s = 0.0;
        for (std::size_t b = 0; b < c; ++b) s += work[a * c + b] * v[b];
        mv[a] = s;
      }
      lambda = std::inner_product(v.begin(), v.end(), mv.begin(), 0.0);
      residual = 0.0;
      for (std::size_t a = 0; a < c; ++a) residual += (mv[a] - lambda * v[a]) * (mv[a] - lambda * v[a]);
      residual = std::sqrt(residual);
      if (residual <= tol * scale) break;
      const double norm = std::sqrt(std::inner_product(mv.begin(), mv.end(), mv.begin(), 0.0));
      if (norm == 0.0) break;  // v spans the null space
      for (std::size_t a = 0; a < c; ++a) v[a] = mv[a] / norm;
      // Stay orthogonal to earlier components despite rounding.
      for (const auto& u : found) {
        const double d = std::inner_product(v.begin(), v.end(), u.begin(), 0.0);
        for (std::size_t k = 0; k < c; ++k) v[k] -= d * u[k];
      }
      const double n2 = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
      for (double& x : v) x /= n2;
    }
    if (it == max_iters) {
      throw NumericError("pca_project: power iteration for component " + std::to_string(comp) +
                         " did not converge, residual " + format_real(residual));
    }
    const std::size_t arg = static_cast<std::size_t>(
        std::max_element(v.begin(), v.end(), [](double a, double b) { return std::abs(a) < std::abs(b); }) -
        v.begin());
    if (v[arg] < 0.0)
      for (double& x : v) x = -x;
    lambda = std::max(lambda, 0.0);
    for (std::size_t a = 0; a < c; ++a)
      for (std::size_t b = 0; b < c; ++b) work[a * c + b] -= lambda * v[a] * v[b];
    out.explained_variance.push_back(lambda);
    found.push_back(std::move(v));
  }

  std::vector<double> comps, proj(n * dims, 0.0);
  for (const auto& u : found) comps.insert(comps.end(), u.begin(), u.end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < dims; ++d)
      for (std::size_t k = 0; k < c; ++k) proj[i * dims + d] += centered[i * c + k] * found[d][k];
  out.components = Tensor({dims, c}, std::move(comps));
  out.projected = Tensor({n, dims}, std::move(proj));
  return out;
}

}  // namespace maskattn
