#include "maskattn/attention.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "maskattn/error.hpp"
#include "maskattn/ops.hpp"
#include "tensor/kernels.hpp"

namespace maskattn {

using detail::ImplPtr;
using detail::TensorImpl;

std::string to_string(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::soft: return "soft";
    case AttentionMode::hard: return "hard";
    case AttentionMode::none: return "none";
  }
  return "?";
}

AttentionMode parse_attention_mode(const std::string& text) {
  if (text == "soft") return AttentionMode::soft;
  if (text == "hard") return AttentionMode::hard;
  if (text == "none") return AttentionMode::none;
  throw ConfigError("unknown attention mode '" + text + "' (expected soft|hard|none)");
}

void AttentionConfig::validate() const {
  if (model_dim == 0 || num_heads == 0) throw ConfigError("model_dim and num_heads must be positive");
  if (model_dim % num_heads != 0) {
    throw ConfigError("model_dim " + std::to_string(model_dim) + " not divisible by num_heads " +
                      std::to_string(num_heads));
  }
  if (mask_scale_init.size() != num_heads) {
    throw ConfigError("mask_scale_init has " + std::to_string(mask_scale_init.size()) + " entries for " +
                      std::to_string(num_heads) + " heads");
  }
  for (double a : mask_scale_init) {
    if (!(a > 0.0)) throw ConfigError("mask_scale_init entries must be positive");
  }
}

namespace {

struct AttentionDims {
  std::size_t nq, nk, width, heads, hd;
};

AttentionDims check_inputs(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask,
                           const Tensor& mask_scales, std::size_t heads, AttentionMode mode,
                           bool require_positive_scale = true) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw DimensionError("attention: Q, K, V must be matrices");
  }
  const std::size_t nq = q.dim(0), nk = k.dim(0), width = q.dim(1);
  if (k.dim(1) != width || v.dim(1) != width || v.dim(0) != nk) {
    throw DimensionError("attention: Q " + shape_to_string(q.shape()) + ", K " +
                         shape_to_string(k.shape()) + ", V " + shape_to_string(v.shape()));
  }
  if (heads == 0 || width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(width) + " not divisible into " +
                         std::to_string(heads) + " heads");
  }
  if (mode != AttentionMode::none) {
    if (!mask.defined()) throw UsageError("attention: mask required in mode " + to_string(mode));
    if (mask.rank() != 2 || mask.dim(0) != nq || mask.dim(1) != nk) {
      throw DimensionError("attention: mask " + shape_to_string(mask.shape()) + " for " +
                           std::to_string(nq) + " queries and " + std::to_string(nk) + " keys");
    }
  }
  if (mode == AttentionMode::soft) {
    if (!mask_scales.defined() || mask_scales.numel() != heads) {
      throw DimensionError("attention: need one mask_scale per head");
    }
    for (double a : mask_scales.data()) {
      if (require_positive_scale && !(a > 0.0)) {
        throw ContractError("attention: mask_scale must be positive, got " + std::to_string(a));
      }
    }
    for (double m : mask.data()) {
      if (!std::isfinite(m)) throw NumericError("soft-masked attention: non-finite mask value");
      if (!(m >= -1e-9 && m <= 1.0 + 1e-9)) {
        throw ContractError("soft-masked attention: mask value " + std::to_string(m) +
                            " outside [0, 1]");
      }
    }
  }
  if (mode == AttentionMode::hard) {
    const auto m = mask.data();
    for (std::size_t r = 0; r < nq; ++r) {
      bool any = false;
      for (std::size_t c = 0; c < nk; ++c) {
        const double x = m[r * nk + c];
        if (x != 0.0 && x != 1.0) {
          throw ContractError("hard-masked attention: mask value " + std::to_string(x) +
                              " is not binary");
        }
        any = any || x == 1.0;
      }
      if (!any) {
        throw ContractError("hard-masked attention: query row " + std::to_string(r) +
                            " has no active key");
      }
    }
  }
  return {nq, nk, width, heads, width / heads};
}

// Copies column block [h*hd, (h+1)*hd) of a row-major [rows x width] matrix.
std::vector<double> column_block(const double* src, std::size_t rows, std::size_t width,
                                 std::size_t h, std::size_t hd) {
  std::vector<double> out(rows * hd);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(src + r * width + h * hd, hd, out.data() + r * hd);
  return out;
}

// Pre-softmax logits of one head into `logits` [nq x nk].
void head_logits(const double* q, const double* k, const double* mask, double mask_scale,
                 const AttentionDims& d, std::size_t h, AttentionMode mode, double* logits) {
  const auto qh = column_block(q, d.nq, d.width, h, d.hd);
  const auto kh = column_block(k, d.nk, d.width, h, d.hd);
  std::fill(logits, logits + d.nq * d.nk, 0.0);
  kernels::gemm_nt(qh.data(), kh.data(), logits, d.nq, d.hd, d.nk);
  const double inv = 1.0 / std::sqrt(static_cast<double>(d.hd));
  for (std::size_t i = 0; i < d.nq * d.nk; ++i) {
    double s = logits[i];
    if (mode == AttentionMode::soft) s += mask_scale * mask[i];
    s *= inv;
    if (mode == AttentionMode::hard && mask[i] == 0.0) s = kMaskedLogit;
    logits[i] = s;
  }
}

void softmax_rows(double* x, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = x + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      row[c] = std::exp(row[c] - mx);
      total += row[c];
    }
    for (std::size_t c = 0; c < cols; ++c) row[c] /= total;
  }
}

}  // namespace

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask,
                            const Tensor& mask_scales, std::size_t heads, AttentionMode mode) {
  const AttentionDims d = check_inputs(q, k, v, mask, mask_scales, heads, mode);
  const double* mask_data = mode == AttentionMode::none ? nullptr : mask.data().data();

  // weights[h][nq x nk], kept for the backward pass.
  auto weights = std::make_shared<std::vector<double>>(heads * d.nq * d.nk);
  std::vector<double> out(d.nq * d.width, 0.0);
  std::vector<double> head_out(d.nq * d.hd);
  for (std::size_t h = 0; h < heads; ++h) {
    double* w = weights->data() + h * d.nq * d.nk;
    const double mask_scale = mode == AttentionMode::soft ? mask_scales.data()[h] : 0.0;
    head_logits(q.data().data(), k.data().data(), mask_data, mask_scale, d, h, mode, w);
    softmax_rows(w, d.nq, d.nk);
    const auto vh = column_block(v.data().data(), d.nk, d.width, h, d.hd);
    std::fill(head_out.begin(), head_out.end(), 0.0);
    kernels::gemm_nn(w, vh.data(), head_out.data(), d.nq, d.nk, d.hd);
    for (std::size_t r = 0; r < d.nq; ++r)
      std::copy_n(head_out.data() + r * d.hd, d.hd, out.data() + r * d.width + h * d.hd);
  }

  std::vector<const Tensor*> inputs{&q, &k, &v};
  ImplPtr iq = q.impl(), ik = k.impl(), iv = v.impl();
  ImplPtr im, ia;
  if (mode == AttentionMode::soft) {
    inputs.push_back(&mask);
    inputs.push_back(&mask_scales);
    im = mask.impl();
    ia = mask_scales.impl();
  }
  return Graph::active().record(
      {d.nq, d.width}, std::move(out), inputs, [=](const TensorImpl& o) {
        double* gq = grad_target(iq);
        double* gk = grad_target(ik);
        double* gv = grad_target(iv);
        double* gm = im ? grad_target(im) : nullptr;
        double* ga = ia ? grad_target(ia) : nullptr;
        const double inv = 1.0 / std::sqrt(static_cast<double>(d.hd));
        std::vector<double> dw(d.nq * d.nk);
        for (std::size_t h = 0; h < d.heads; ++h) {
          const double* w = weights->data() + h * d.nq * d.nk;
          const auto go = column_block(o.grad.data(), d.nq, d.width, h, d.hd);
          const auto vh = column_block(iv->data.data(), d.nk, d.width, h, d.hd);
          if (gv) {
            std::vector<double> dv(d.nk * d.hd, 0.0);
            kernels::gemm_tn(w, go.data(), dv.data(), d.nk, d.nq, d.hd);
            for (std::size_t r = 0; r < d.nk; ++r)
              for (std::size_t c = 0; c < d.hd; ++c) gv[r * d.width + h * d.hd + c] += dv[r * d.hd + c];
          }
          if (!gq && !gk && !gm && !ga) continue;
          // dw = dOut * V^T, then through the row softmax.
          std::fill(dw.begin(), dw.end(), 0.0);
          kernels::gemm_nt(go.data(), vh.data(), dw.data(), d.nq, d.hd, d.nk);
          for (std::size_t r = 0; r < d.nq; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d.nk; ++c) dot += w[r * d.nk + c] * dw[r * d.nk + c];
            for (std::size_t c = 0; c < d.nk; ++c) {
              const std::size_t i = r * d.nk + c;
              dw[i] = w[i] * (dw[i] - dot) * inv;  // now d(raw logit)
            }
          }
          if (gq) {
            const auto kh = column_block(ik->data.data(), d.nk, d.width, h, d.hd);
            std::vector<double> dq(d.nq * d.hd, 0.0);
            kernels::gemm_nn(dw.data(), kh.data(), dq.data(), d.nq, d.nk, d.hd);
            for (std::size_t r = 0; r < d.nq; ++r)
              for (std::size_t c = 0; c < d.hd; ++c) gq[r * d.width + h * d.hd + c] += dq[r * d.hd + c];
          }
          if (gk) {
            const auto qh = column_block(iq->data.data(), d.nq, d.width, h, d.hd);
            std::vector<double> dk(d.nk * d.hd, 0.0);
            kernels::gemm_tn(dw.data(), qh.data(), dk.data(), d.nk, d.nq, d.hd);
            for (std::size_t r = 0; r < d.nk; ++r)
              for (std::size_t c = 0; c < d.hd; ++c) gk[r * d.width + h * d.hd + c] += dk[r * d.hd + c];
          }
          if (gm || ga) {
            const double mask_scale = ia->data[h];
            double acc = 0.0;
            for (std::size_t i = 0; i < d.nq * d.nk; ++i) {
              if (gm) gm[i] += mask_scale * dw[i];
              acc += dw[i] * im->data[i];
            }
            if (ga) ga[h] += acc;
          }
        }
      });
}

Tensor attention_logits(const Tensor& queries, const Tensor& keys) {
  if (queries.rank() != 2 || keys.rank() != 2 || queries.dim(1) != keys.dim(1)) {
    throw DimensionError("attention_logits: Q " + shape_to_string(queries.shape()) + ", K " +
                         shape_to_string(keys.shape()));
  }
  return matmul(queries, transpose(keys));
}

Tensor soft_masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask,
                             const Tensor& mask_scale) {
  if (!mask.defined()) throw UsageError("soft_masked_attention: mask required");
  return multi_head_attention(q, k, v, mask, mask_scale, 1, AttentionMode::soft);
}

Tensor hard_masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             const Tensor& mask_binary) {
  if (!mask_binary.defined()) throw UsageError("hard_masked_attention: mask required");
  return multi_head_attention(q, k, v, mask_binary, Tensor(), 1, AttentionMode::hard);
}

Tensor unmasked_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  return multi_head_attention(q, k, v, Tensor(), Tensor(), 1, AttentionMode::none);
}

Tensor attention_weights(const Tensor& q, const Tensor& k, const Tensor& mask, const Tensor& mask_scales,
                         std::size_t heads, std::size_t head, AttentionMode mode) {
  const AttentionDims d = check_inputs(q, k, k, mask, mask_scales, heads, mode);
  if (head >= heads) throw UsageError("attention_weights: head index out of range");
  std::vector<double> w(d.nq * d.nk);
  const double mask_scale = mode == AttentionMode::soft ? mask_scales.data()[head] : 0.0;
  head_logits(q.data().data(), k.data().data(),
              mode == AttentionMode::none ? nullptr : mask.data().data(), mask_scale, d, head, mode,
              w.data());
  softmax_rows(w.data(), d.nq, d.nk);
  return Tensor({d.nq, d.nk}, std::move(w));
}

Tensor binarize_mask_rows(const Tensor& mask) {
  if (mask.rank() != 2) throw DimensionError("binarize_mask_rows: mask must be a matrix");
  const std::size_t rows = mask.dim(0), cols = mask.dim(1);
  std::vector<double> out(mask.numel());
  const auto m = mask.data();
  for (std::size_t r = 0; r < rows; ++r) {
    bool any = false;
    for (std::size_t c = 0; c < cols; ++c) {
      const bool on = m[r * cols + c] >= 0.5;
      out[r * cols + c] = on ? 1.0 : 0.0;
      any = any || on;
    }
    if (!any) std::fill(out.begin() + r * cols, out.begin() + (r + 1) * cols, 1.0);
  }
  return Tensor(mask.shape(), std::move(out));
}

// ---------------------------------------------------------------------------

AttentionLayer::AttentionLayer(const std::string& prefix, const AttentionConfig& config, Rng& rng,
                               ParameterSet& params)
    : config_(config) {
  config_.validate();
  const std::size_t c = config_.model_dim;
  const double bound = std::sqrt(3.0 / static_cast<double>(c));
  w_q_ = params.add(prefix + ".w_q", uniform_init({c, c}, bound, rng));
  w_k_ = params.add(prefix + ".w_k", uniform_init({c, c}, bound, rng));
  w_v_ = params.add(prefix + ".w_v", uniform_init({c, c}, bound, rng));
  w_o_ = params.add(prefix + ".w_o", uniform_init({c, c}, bound, rng));
  norm_gamma_ = params.add(prefix + ".norm.gamma", Tensor::full({c}, 1.0, true));
  norm_beta_ = params.add(prefix + ".norm.beta", Tensor::zeros({c}, true));
  for (std::size_t h = 0; h < config_.num_heads; ++h) {
    mask_scales_.push_back(params.add(prefix + ".mask_scale" + std::to_string(h),
                                 Tensor::scalar(config_.mask_scale_init[h], true), kMaskScaleFloor));
  }
}

Tensor AttentionLayer::mask_scale_vector() const { return concat0(mask_scales_); }

Tensor AttentionLayer::attend(const Tensor& normed_q, const Tensor& keys_values, const Tensor& mask,
                              AttentionMode mode) const {
  const Tensor q = matmul(normed_q, w_q_);
  const Tensor k = matmul(keys_values, w_k_);
  const Tensor v = matmul(keys_values, w_v_);
  Tensor heads;
  switch (mode) {
    case AttentionMode::soft:
      heads = multi_head_attention(q, k, v, mask, mask_scale_vector(), config_.num_heads, mode);
      break;
    case AttentionMode::hard:
      heads = multi_head_attention(q, k, v, binarize_mask_rows(mask), Tensor(), config_.num_heads,
                                   mode);
      break;
    case AttentionMode::none:
      heads = multi_head_attention(q, k, v, Tensor(), Tensor(), config_.num_heads, mode);
      break;
  }
  return matmul(heads, w_o_);
}

Tensor AttentionLayer::forward(const Tensor& queries, const Tensor& keys_values, const Tensor& mask,
                               AttentionMode mode) const {
  const Tensor normed = layer_norm(queries, norm_gamma_, norm_beta_);
  return add(queries, attend(normed, keys_values, mask, mode));
}

Tensor AttentionLayer::forward_self(const Tensor& x) const {
  const Tensor normed = layer_norm(x, norm_gamma_, norm_beta_);
  return add(x, attend(normed, normed, Tensor(), AttentionMode::none));
}

Tensor AttentionLayer::export_logits(const Tensor& queries, const Tensor& keys_values,
                                     const Tensor& mask, std::size_t head) const {
  if (head >= config_.num_heads) {
    throw UsageError("head " + std::to_string(head) + " out of range (" +
                     std::to_string(config_.num_heads) + " heads)");
  }
  NoGradGuard guard;
  const Tensor normed = layer_norm(queries, norm_gamma_, norm_beta_);
  const Tensor q = matmul(normed, w_q_);
  const Tensor k = matmul(keys_values, w_k_);
  Tensor mask_scales = mask_scale_vector();
  const AttentionDims d = check_inputs(q, k, k, mask, mask_scales, config_.num_heads, AttentionMode::soft,
                                       /*require_positive_scale=*/false);
  std::vector<double> logits(d.nq * d.nk);
  head_logits(q.data().data(), k.data().data(), mask.data().data(), mask_scales.data()[head], d, head,
              AttentionMode::soft, logits.data());
  return Tensor({d.nq, d.nk}, std::move(logits));
}

}  // namespace maskattn
