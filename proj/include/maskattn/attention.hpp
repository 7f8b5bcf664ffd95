#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "maskattn/params.hpp"
#include "maskattn/rng.hpp"
#include "maskattn/tensor.hpp"

namespace maskattn {

enum class AttentionMode { soft, hard, none };

std::string to_string(AttentionMode mode);
AttentionMode parse_attention_mode(const std::string& text);

// Smallest value a mask-offset scale may take after an optimizer step.
inline constexpr double kMaskScaleFloor = 1e-4;
// Stand-in for -infinity on masked-out logits.
inline constexpr double kMaskedLogit = -1e30;

struct AttentionConfig {
  std::size_t model_dim = 64;
  std::size_t num_heads = 8;
  std::vector<double> mask_scale_init{32, 32, 16, 16, 8, 8, 4, 4};

  void validate() const;
  std::size_t head_dim() const { return model_dim / num_heads; }
};

// L[q, k] = <Q[q], K[k]>, unscaled.
Tensor attention_logits(const Tensor& queries, const Tensor& keys);

// softmax_k((Q K^T + mask_scale M) / sqrt(d)) V, differentiable in Q, K, V, M and
// mask_scale. M is indexed [query, key] with values in [0, 1]; mask_scale is a
// one-element positive tensor.
Tensor soft_masked_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask,
                             const Tensor& mask_scale);

// Logits of keys with mask 0 are replaced by kMaskedLogit. No gradient flows to
// the mask. Every query row needs at least one active key.
Tensor hard_masked_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                             const Tensor& mask_binary);

Tensor unmasked_attention(const Tensor& q, const Tensor& k, const Tensor& v);

// Fused multi-head attention over column blocks of width model_dim / heads.
// `mask_scales` has one entry per head (soft mode only); `mask` is unused in mode
// none. Returns [Nq x model_dim].
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& mask,
                            const Tensor& mask_scales, std::size_t heads, AttentionMode mode);

// Post-softmax weights of one head, [Nq x Nk]. Not recorded.
Tensor attention_weights(const Tensor& q, const Tensor& k, const Tensor& mask, const Tensor& mask_scales,
                         std::size_t heads, std::size_t head, AttentionMode mode);

// Thresholds a soft mask at 0.5. Query rows left without any active key are
// opened to every key.
Tensor binarize_mask_rows(const Tensor& mask);

// Pre-norm multi-head attention sublayer with residual:
//   out = x + W_o * attention(LN(x) W_q, kv W_k, kv W_v, M)
class AttentionLayer {
 public:
  AttentionLayer() = default;
  AttentionLayer(const std::string& prefix, const AttentionConfig& config, Rng& rng,
                 ParameterSet& params);

  // Cross-attention from `queries` [Nq x C] to `keys_values` [Nk x C].
  Tensor forward(const Tensor& queries, const Tensor& keys_values, const Tensor& mask,
                 AttentionMode mode) const;
  // Self-attention: keys and values are the normalized queries.
  Tensor forward_self(const Tensor& x) const;

  // (Q K^T + mask_scale M) / sqrt(d) for one head, after masking and before softmax.
  Tensor export_logits(const Tensor& queries, const Tensor& keys_values, const Tensor& mask,
                       std::size_t head) const;

  Tensor mask_scale_vector() const;
  const std::vector<Tensor>& mask_scales() const { return mask_scales_; }
  const AttentionConfig& config() const { return config_; }

 private:
  Tensor attend(const Tensor& normed_q, const Tensor& keys_values, const Tensor& mask,
                AttentionMode mode) const;

  AttentionConfig config_;
  Tensor w_q_, w_k_, w_v_, w_o_;
  Tensor norm_gamma_, norm_beta_;
  std::vector<Tensor> mask_scales_;
};

}  // namespace maskattn
