#pragma once

#include "maskattn/model.hpp"
#include "maskattn/tensor.hpp"

namespace maskattn {

// Mean over pixels of -sum_c target[c] log(max(pred[c], 1e-12)).
// pred, target: [K x H x W].
Tensor cross_entropy_loss(const Tensor& pred, const Tensor& target);

// Mean over objects of 1 - (2 sum p g + eps) / (sum p + sum g + eps).
// pred, target: [N_obj x H x W].
Tensor dice_loss(const Tensor& pred, const Tensor& target, double eps = 1.0);

struct LossTerms {
  Tensor total;
  double cross_entropy = 0.0;
  double dice = 0.0;
};

// Cross-entropy plus dice, both with weight one.
LossTerms total_loss(const MaskSet& pred, const Tensor& target);

// One-hot target channels for binary object masks [N x H x W]: a pixel belongs
// to the object whose mask exceeds 0.5, otherwise to its background grid
// cell. The catch-all channel, when present, is never a target.
Tensor target_channels(const Tensor& object_masks, std::size_t grid, bool catch_all);

// Object masks thresholded at 0.5.
Tensor binarize(const Tensor& masks);

}  // namespace maskattn
