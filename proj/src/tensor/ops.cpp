#include "maskattn/ops.hpp"

#include <algorithm>
#include <cmath>

#include "kernels.hpp"
#include "maskattn/error.hpp"

namespace maskattn {

namespace {

using detail::ImplPtr;
using detail::TensorImpl;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()) + " differ");
  }
}

void require_rank(const Tensor& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_to_string(a.shape()));
  }
}

std::vector<double> transposed(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  ImplPtr ia = a.impl(), ib = b.impl();
  return Graph::active().record(a.shape(), std::move(out), {&a, &b}, [ia, ib](const TensorImpl& o) {
    for (const auto& in : {ia, ib}) {
      if (double* g = grad_target(in))
        for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.data().begin(), a.data().end());
  const auto y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  ImplPtr ia = a.impl(), ib = b.impl();
  return Graph::active().record(a.shape(), std::move(out), {&a, &b}, [ia, ib](const TensorImpl& o) {
    if (double* g = grad_target(ia))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
    if (double* g = grad_target(ib))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] -= o.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto x = a.data();
  const auto y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  ImplPtr ia = a.impl(), ib = b.impl();
  return Graph::active().record(a.shape(), std::move(out), {&a, &b}, [ia, ib](const TensorImpl& o) {
    if (double* g = grad_target(ia))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * ib->data[i];
    if (double* g = grad_target(ib))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * ia->data[i];
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  ImplPtr ia = a.impl();
  return Graph::active().record(a.shape(), std::move(out), {&a}, [ia, factor](const TensorImpl& o) {
    if (double* g = grad_target(ia))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * factor;
  });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("mul_scalar: factor must have one element");
  const double f = s.item();
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= f;
  ImplPtr ia = a.impl(), is = s.impl();
  return Graph::active().record(a.shape(), std::move(out), {&a, &s}, [ia, is](const TensorImpl& o) {
    const double f = is->data[0];
    if (double* g = grad_target(ia))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i] * f;
    if (double* g = grad_target(is)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * ia->data[i];
      g[0] += acc;
    }
  });
}

Tensor add_scalar(const Tensor& a, double value) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += value;
  ImplPtr ia = a.impl();
  return Graph::active().record(a.shape(), std::move(out), {&a}, [ia](const TensorImpl& o) {
    if (double* g = grad_target(ia))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  ImplPtr ia = a.impl();
  return Graph::active().record(a.shape(), std::move(out), {&a}, [ia](const TensorImpl& o) {
    if (double* g = grad_target(ia))
      for (std::size_t i = 0; i < o.grad.size(); ++i)
        if (ia->data[i] > 0.0) g[i] += o.grad[i];
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_row_bias");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.numel() != cols) {
    throw DimensionError("add_row_bias: bias " + shape_to_string(bias.shape()) + " vs rows of " +
                         shape_to_string(x.shape()));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  const auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += b[c];
  ImplPtr ix = x.impl(), ib = bias.impl();
  return Graph::active().record(x.shape(), std::move(out), {&x, &bias},
                                [ix, ib, rows, cols](const TensorImpl& o) {
                                  if (double* g = grad_target(ix))
                                    for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
                                  if (double* g = grad_target(ib))
                                    for (std::size_t r = 0; r < rows; ++r)
                                      for (std::size_t c = 0; c < cols; ++c)
                                        g[c] += o.grad[r * cols + c];
                                });
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  ImplPtr ia = a.impl();
  return Graph::active().record({1}, {acc}, {&a}, [ia](const TensorImpl& o) {
    if (double* g = grad_target(ia))
      for (std::size_t i = 0; i < ia->data.size(); ++i) g[i] += o.grad[0];
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, const Shape& shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape " + shape_to_string(a.shape()) + " -> " + shape_to_string(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  ImplPtr ia = a.impl();
  return Graph::active().record(shape, std::move(out), {&a}, [ia](const TensorImpl& o) {
    if (double* g = grad_target(ia))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  ImplPtr ia = a.impl();
  return Graph::active().record({c, r}, transposed(a.data().data(), r, c), {&a},
                                [ia, r, c](const TensorImpl& o) {
                                  if (double* g = grad_target(ia))
                                    for (std::size_t i = 0; i < r; ++i)
                                      for (std::size_t j = 0; j < c; ++j)
                                        g[i * c + j] += o.grad[j * r + i];
                                });
}

Tensor slice0(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.rank() == 0 || begin >= end || end > a.dim(0)) {
    throw DimensionError("slice0 [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") of " + shape_to_string(a.shape()));
  }
  const std::size_t inner = a.numel() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<double> out(a.data().begin() + begin * inner, a.data().begin() + end * inner);
  ImplPtr ia = a.impl();
  const std::size_t offset = begin * inner;
  return Graph::active().record(shape, std::move(out), {&a}, [ia, offset](const TensorImpl& o) {
    if (double* g = grad_target(ia))
      for (std::size_t i = 0; i < o.grad.size(); ++i) g[offset + i] += o.grad[i];
  });
}

Tensor concat0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat0 of zero tensors");
  Shape shape = parts.front().shape();
  const Shape trailing(shape.begin() + 1, shape.end());
  std::size_t rows = 0;
  std::vector<double> out;
  std::vector<const Tensor*> inputs;
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != trailing) {
      throw DimensionError("concat0: " + shape_to_string(p.shape()) + " vs " +
                           shape_to_string(parts.front().shape()));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
    inputs.push_back(&p);
    impls.push_back(p.impl());
  }
  shape[0] = rows;
  return Graph::active().record(shape, std::move(out), inputs, [impls](const TensorImpl& o) {
    std::size_t offset = 0;
    for (const auto& in : impls) {
      if (double* g = grad_target(in))
        for (std::size_t i = 0; i < in->data.size(); ++i) g[i] += o.grad[offset + i];
      offset += in->data.size();
    }
  });
}

Tensor average(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("average of zero tensors");
  std::vector<double> out(parts.front().numel(), 0.0);
  std::vector<const Tensor*> inputs;
  std::vector<ImplPtr> impls;
  for (const auto& p : parts) {
    require_same_shape(parts.front(), p, "average");
    const auto d = p.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += d[i];
    inputs.push_back(&p);
    impls.push_back(p.impl());
  }
  const double w = 1.0 / static_cast<double>(parts.size());
  for (auto& v : out) v *= w;
  return Graph::active().record(parts.front().shape(), std::move(out), inputs,
                                [impls, w](const TensorImpl& o) {
                                  for (const auto& in : impls)
                                    if (double* g = grad_target(in))
                                      for (std::size_t i = 0; i < o.grad.size(); ++i)
                                        g[i] += w * o.grad[i];
                                });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: " + shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  ImplPtr ia = a.impl(), ib = b.impl();
  return Graph::active().record({m, n}, std::move(out), {&a, &b},
                                [ia, ib, m, k, n](const TensorImpl& o) {
                                  if (double* g = grad_target(ia)) {
                                    const auto bt = transposed(ib->data.data(), k, n);
                                    kernels::gemm_nn(o.grad.data(), bt.data(), g, m, n, k);
                                  }
                                  if (double* g = grad_target(ib))
                                    kernels::gemm_tn(ia->data.data(), o.grad.data(), g, k, m, n);
                                });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(0)) {
    throw DimensionError("linear: " + shape_to_string(x.shape()) + " x " +
                         shape_to_string(weight.shape()));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), n = weight.dim(1);
  if (bias.defined() && bias.numel() != n) {
    throw DimensionError("linear: bias " + shape_to_string(bias.shape()) + " for " +
                         std::to_string(n) + " outputs");
  }
  std::vector<double> out(m * n, 0.0);
  if (bias.defined()) {
    const auto b = bias.data();
    for (std::size_t i = 0; i < m; ++i) std::copy(b.begin(), b.end(), out.begin() + i * n);
  }
  kernels::gemm_nn(x.data().data(), weight.data().data(), out.data(), m, k, n);
  ImplPtr ix = x.impl(), iw = weight.impl();
  ImplPtr ib = bias.defined() ? bias.impl() : nullptr;
  std::vector<const Tensor*> inputs{&x, &weight};
  if (bias.defined()) inputs.push_back(&bias);
  return Graph::active().record({m, n}, std::move(out), inputs,
                                [ix, iw, ib, m, k, n](const TensorImpl& o) {
                                  if (double* g = grad_target(ix)) {
                                    const auto wt = transposed(iw->data.data(), k, n);
                                    kernels::gemm_nn(o.grad.data(), wt.data(), g, m, n, k);
                                  }
                                  if (double* g = grad_target(iw))
                                    kernels::gemm_tn(ix->data.data(), o.grad.data(), g, k, m, n);
                                  if (ib)
                                    if (double* g = grad_target(ib))
                                      for (std::size_t i = 0; i < m; ++i)
                                        for (std::size_t j = 0; j < n; ++j) g[j] += o.grad[i * n + j];
                                });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) {
    throw DimensionError("softmax axis " + std::to_string(axis) + " for " + shape_to_string(shape));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      double mx = in[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[base + i * inner]);
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(in[base + i * inner] - mx);
        out[base + i * inner] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] *= inv;
    }
  }
  ImplPtr ix = x.impl();
  return Graph::active().record(shape, std::move(out), {&x},
                                [ix, outer, inner, n](const TensorImpl& o) {
                                  double* g = grad_target(ix);
                                  if (!g) return;
                                  for (std::size_t a = 0; a < outer; ++a)
                                    for (std::size_t j = 0; j < inner; ++j) {
                                      const std::size_t base = a * n * inner + j;
                                      double dot = 0.0;
                                      for (std::size_t i = 0; i < n; ++i)
                                        dot += o.grad[base + i * inner] * o.data[base + i * inner];
                                      for (std::size_t i = 0; i < n; ++i) {
                                        const std::size_t p = base + i * inner;
                                        g[p] += o.data[p] * (o.grad[p] - dot);
                                      }
                                    }
                                });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, Conv2dOptions options) {
  require_rank(x, 3, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const std::size_t stride = options.stride, pad = options.padding;
  if (weight.dim(1) != cin) {
    throw DimensionError("conv2d: weight " + shape_to_string(weight.shape()) + " for input " +
                         shape_to_string(x.shape()));
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  if (kh > h + 2 * pad || kw > w + 2 * pad) {
    throw DimensionError("conv2d: kernel " + shape_to_string(weight.shape()) +
                         " larger than padded input " + shape_to_string(x.shape()));
  }
  if (bias.defined() && bias.numel() != cout) {
    throw DimensionError("conv2d: bias " + shape_to_string(bias.shape()));
  }
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
  const std::size_t kdim = cin * kh * kw, pixels = ho * wo;

  // cols[(c, ky, kx), (oy, ox)]
  auto cols = std::make_shared<std::vector<double>>(kdim * pixels, 0.0);
  const auto in = x.data();
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        double* row = cols->data() + ((c * kh + ky) * kw + kx) * pixels;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            row[oy * wo + ox] = in[(c * h + iy) * w + ix];
          }
        }
      }

  std::vector<double> out(cout * pixels, 0.0);
  if (bias.defined()) {
    const auto b = bias.data();
    for (std::size_t o = 0; o < cout; ++o)
      std::fill(out.begin() + o * pixels, out.begin() + (o + 1) * pixels, b[o]);
  }
  kernels::gemm_nn(weight.data().data(), cols->data(), out.data(), cout, kdim, pixels);

  ImplPtr ix = x.impl(), iw = weight.impl();
  ImplPtr ib = bias.defined() ? bias.impl() : nullptr;
  std::vector<const Tensor*> inputs{&x, &weight};
  if (bias.defined()) inputs.push_back(&bias);
  return Graph::active().record(
      {cout, ho, wo}, std::move(out), inputs,
      [=](const TensorImpl& o) {
        if (double* g = grad_target(iw)) {
          const auto cols_t = transposed(cols->data(), kdim, pixels);
          kernels::gemm_nn(o.grad.data(), cols_t.data(), g, cout, pixels, kdim);
        }
        if (ib)
          if (double* g = grad_target(ib))
            for (std::size_t c = 0; c < cout; ++c)
              for (std::size_t p = 0; p < pixels; ++p) g[c] += o.grad[c * pixels + p];
        if (double* g = grad_target(ix)) {
          std::vector<double> dcols(kdim * pixels, 0.0);
          kernels::gemm_tn(iw->data.data(), o.grad.data(), dcols.data(), kdim, cout, pixels);
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const double* row = dcols.data() + ((c * kh + ky) * kw + kx) * pixels;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const long ixx = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                    if (ixx < 0 || ixx >= static_cast<long>(w)) continue;
                    g[(c * h + iy) * w + ixx] += row[oy * wo + ox];
                  }
                }
              }
        }
      });
}

namespace {

struct InterpTap {
  std::size_t lo, hi;
  double w_hi;
};

std::vector<InterpTap> interpolation_taps(std::size_t in_size, std::size_t factor) {
  std::vector<InterpTap> taps(in_size * factor);
  for (std::size_t o = 0; o < taps.size(); ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in_size - 1) lo = in_size - 1;
    const std::size_t hi = std::min(lo + 1, in_size - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& x, std::size_t factor) {
  if (factor != 2 && factor != 4) {
    throw ConfigError("upsample_bilinear: unsupported factor " + std::to_string(factor));
  }
  require_rank(x, 3, "upsample_bilinear");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  const auto ty = interpolation_taps(h, factor);
  const auto tx = interpolation_taps(w, factor);
  const auto in = x.data();
  std::vector<double> out(c * oh * ow);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = in.data() + ch * h * w;
    double* dst = out.data() + ch * oh * ow;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const auto& b = tx[ox];
        const double top = src[a.lo * w + b.lo] * (1.0 - b.w_hi) + src[a.lo * w + b.hi] * b.w_hi;
        const double bot = src[a.hi * w + b.lo] * (1.0 - b.w_hi) + src[a.hi * w + b.hi] * b.w_hi;
        dst[oy * ow + ox] = top * (1.0 - a.w_hi) + bot * a.w_hi;
      }
    }
  }
  ImplPtr ix = x.impl();
  return Graph::active().record(
      {c, oh, ow}, std::move(out), {&x}, [ix, ty, tx, c, h, w, oh, ow](const TensorImpl& o) {
        double* g = grad_target(ix);
        if (!g) return;
        for (std::size_t ch = 0; ch < c; ++ch) {
          double* dst = g + ch * h * w;
          const double* go = o.grad.data() + ch * oh * ow;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto& a = ty[oy];
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto& b = tx[ox];
              const double v = go[oy * ow + ox];
              dst[a.lo * w + b.lo] += v * (1.0 - a.w_hi) * (1.0 - b.w_hi);
              dst[a.lo * w + b.hi] += v * (1.0 - a.w_hi) * b.w_hi;
              dst[a.hi * w + b.lo] += v * a.w_hi * (1.0 - b.w_hi);
              dst[a.hi * w + b.hi] += v * a.w_hi * b.w_hi;
            }
          }
        }
      });
}

Tensor avg_pool(const Tensor& x, std::size_t factor) {
  require_rank(x, 3, "avg_pool");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (factor == 0 || h % factor || w % factor) {
    throw DimensionError("avg_pool: factor " + std::to_string(factor) + " does not divide " +
                         shape_to_string(x.shape()));
  }
  const std::size_t oh = h / factor, ow = w / factor;
  const double norm = 1.0 / static_cast<double>(factor * factor);
  const auto in = x.data();
  std::vector<double> out(c * oh * ow, 0.0);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx)
        out[(ch * oh + y / factor) * ow + xx / factor] += in[(ch * h + y) * w + xx] * norm;
  ImplPtr ix = x.impl();
  return Graph::active().record({c, oh, ow}, std::move(out), {&x},
                                [ix, c, h, w, oh, ow, factor, norm](const TensorImpl& o) {
                                  double* g = grad_target(ix);
                                  if (!g) return;
                                  for (std::size_t ch = 0; ch < c; ++ch)
                                    for (std::size_t y = 0; y < h; ++y)
                                      for (std::size_t xx = 0; xx < w; ++xx)
                                        g[(ch * h + y) * w + xx] +=
                                            o.grad[(ch * oh + y / factor) * ow + xx / factor] * norm;
                                });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() == 0) throw DimensionError("layer_norm on rank-0 tensor");
  const std::size_t cols = x.shape().back();
  if (gamma.numel() != cols || beta.numel() != cols) {
    throw DimensionError("layer_norm: gamma/beta " + shape_to_string(gamma.shape()) + " for " +
                         shape_to_string(x.shape()));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / cols;
  const auto in = x.data();
  const auto gm = gamma.data();
  const auto bt = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(in.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(in.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * cols;
    double mu = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mu += row[c];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t c = 0; c < cols; ++c) {
      const double xh = (row[c] - mu) * rs;
      (*xhat)[r * cols + c] = xh;
      out[r * cols + c] = xh * gm[c] + bt[c];
    }
  }
  ImplPtr ix = x.impl(), ig = gamma.impl(), ibt = beta.impl();
  return Graph::active().record(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [ix, ig, ibt, xhat, rstd, rows, cols](const TensorImpl& o) {
        double* gx = grad_target(ix);
        double* gg = grad_target(ig);
        double* gb = grad_target(ibt);
        std::vector<double> dxh(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* go = o.grad.data() + r * cols;
          const double* xh = xhat->data() + r * cols;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            if (gg) gg[c] += go[c] * xh[c];
            if (gb) gb[c] += go[c];
            dxh[c] = go[c] * ig->data[c];
            m1 += dxh[c];
            m2 += dxh[c] * xh[c];
          }
          if (!gx) continue;
          m1 /= static_cast<double>(cols);
          m2 /= static_cast<double>(cols);
          for (std::size_t c = 0; c < cols; ++c)
            gx[r * cols + c] += (*rstd)[r] * (dxh[c] - m1 - xh[c] * m2);
        }
      });
}

}  // namespace maskattn
