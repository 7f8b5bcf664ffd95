#pragma once

#include <cstddef>
#include <vector>

#include "maskattn/tensor.hpp"

namespace maskattn {

// Elementwise, equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a * s where s is a one-element tensor (differentiable in both).
Tensor mul_scalar(const Tensor& a, const Tensor& s);
Tensor add_scalar(const Tensor& a, double value);
Tensor relu(const Tensor& a);

// X[N x C] + b[C] broadcast over rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

Tensor reshape(const Tensor& a, const Shape& shape);
Tensor transpose(const Tensor& a);  // rank 2
// Rows [begin, end) along axis 0, any rank.
Tensor slice0(const Tensor& a, std::size_t begin, std::size_t end);
// Concatenation along axis 0; trailing dimensions must agree.
Tensor concat0(const std::vector<Tensor>& parts);
// Arithmetic mean of equally shaped tensors.
Tensor average(const std::vector<Tensor>& parts);

// C[m x n] = A[m x k] * B[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);
// X[N x Cin] * W[Cin x Cout] + b[Cout]. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Numerically stable softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// Cross-correlation. X[Cin x H x W], W[Cout x Cin x kh x kw], bias[Cout] or
// undefined.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias,
              Conv2dOptions options = {});

// Bilinear upsampling with half-pixel centres (align_corners = false).
// X[C x H x W] -> [C x fH x fW]; factor must be 2 or 4.
Tensor upsample_bilinear(const Tensor& x, std::size_t factor);

// Mean over non-overlapping factor x factor blocks. X[C x H x W].
Tensor avg_pool(const Tensor& x, std::size_t factor);

// Normalizes over the last dimension then applies gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

}  // namespace maskattn
