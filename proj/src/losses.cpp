#include "maskattn/losses.hpp"

#include <algorithm>
#include <cmath>

#include "maskattn/error.hpp"
#include "maskattn/ops.hpp"

namespace maskattn {

using detail::ImplPtr;
using detail::TensorImpl;

namespace {

constexpr double kProbFloor = 1e-12;

}  // namespace

Tensor cross_entropy_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape() || pred.rank() != 3) {
    throw DimensionError("cross_entropy_loss: prediction " + shape_to_string(pred.shape()) +
                         ", target " + shape_to_string(target.shape()));
  }
  const std::size_t pixels = pred.dim(1) * pred.dim(2);
  const auto p = pred.data();
  const auto g = target.data();
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (g[i] != 0.0) total -= g[i] * std::log(std::max(p[i], kProbFloor));
  }
  ImplPtr ip = pred.impl(), ig = target.impl();
  return Graph::active().record({1}, {total / static_cast<double>(pixels)}, {&pred},
                                [ip, ig, pixels](const TensorImpl& o) {
                                  double* d = grad_target(ip);
                                  if (!d) return;
                                  const double up = o.grad[0] / static_cast<double>(pixels);
                                  for (std::size_t i = 0; i < ip->data.size(); ++i) {
                                    const double gi = ig->data[i];
                                    if (gi != 0.0 && ip->data[i] > kProbFloor) {
                                      d[i] -= up * gi / ip->data[i];
                                    }
                                  }
                                });
}

Tensor dice_loss(const Tensor& pred, const Tensor& target, double eps) {
  if (pred.shape() != target.shape() || pred.rank() != 3) {
    throw DimensionError("dice_loss: prediction " + shape_to_string(pred.shape()) + ", target " +
                         shape_to_string(target.shape()));
  }
  const std::size_t n = pred.dim(0), plane = pred.dim(1) * pred.dim(2);
  const auto p = pred.data();
  const auto g = target.data();
  std::vector<double> num(n), den(n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double inter = 0.0, sp = 0.0, sg = 0.0;
    for (std::size_t k = i * plane; k < (i + 1) * plane; ++k) {
      inter += p[k] * g[k];
      sp += p[k];
      sg += g[k];
    }
    num[i] = 2.0 * inter + eps;
    den[i] = sp + sg + eps;
    loss += 1.0 - num[i] / den[i];
  }
  ImplPtr ip = pred.impl(), ig = target.impl();
  return Graph::active().record(
      {1}, {loss / static_cast<double>(n)}, {&pred},
      [ip, ig, n, plane, num, den](const TensorImpl& o) {
        double* d = grad_target(ip);
        if (!d) return;
        const double up = o.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          // d/dp_k of -num/den = -(2 g_k den - num) / den^2
          const double inv = 1.0 / (den[i] * den[i]);
          for (std::size_t k = i * plane; k < (i + 1) * plane; ++k) {
            d[k] -= up * (2.0 * ig->data[k] * den[i] - num[i]) * inv;
          }
        }
      });
}

LossTerms total_loss(const MaskSet& pred, const Tensor& target) {
  if (target.rank() != 3 || target.dim(0) != pred.num_channels()) {
    throw DimensionError("total_loss: " + std::to_string(pred.num_channels()) +
                         " predicted channels, target " + shape_to_string(target.shape()));
  }
  const Tensor ce = cross_entropy_loss(pred.channels, target);
  const Tensor dice = dice_loss(pred.object_masks(), slice0(target, 0, pred.num_objects));
  return {add(ce, dice), ce.item(), dice.item()};
}

Tensor binarize(const Tensor& masks) {
  std::vector<double> out(masks.numel());
  const auto m = masks.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m[i] > 0.5 ? 1.0 : 0.0;
  return Tensor(masks.shape(), std::move(out));
}

Tensor target_channels(const Tensor& object_masks, std::size_t grid, bool catch_all) {
  if (object_masks.rank() != 3) {
    throw DimensionError("target_channels: expected [N x H x W], got " +
                         shape_to_string(object_masks.shape()));
  }
  const std::size_t n = object_masks.dim(0), h = object_masks.dim(1), w = object_masks.dim(2);
  const std::size_t plane = h * w, channels = n + grid * grid + (catch_all ? 1 : 0);
  const auto rows = grid_cuts(h, grid), cols = grid_cuts(w, grid);
  const auto m = object_masks.data();
  std::vector<double> out(channels * plane, 0.0);
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx)
      for (std::size_t y = rows[gy]; y < rows[gy + 1]; ++y)
        for (std::size_t x = cols[gx]; x < cols[gx + 1]; ++x) {
          const std::size_t p = y * w + x;
          std::size_t label = n + gy * grid + gx;
          for (std::size_t i = 0; i < n; ++i) {
            if (m[i * plane + p] > 0.5) {
              label = i;
              break;
            }
          }
          out[label * plane + p] = 1.0;
        }
  return Tensor({channels, h, w}, std::move(out));
}

}  // namespace maskattn
