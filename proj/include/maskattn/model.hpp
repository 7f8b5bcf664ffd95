#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "maskattn/attention.hpp"
#include "maskattn/key_value.hpp"
#include "maskattn/params.hpp"
#include "maskattn/tensor.hpp"

namespace maskattn {

struct ModelConfig {
  std::size_t model_dim = 64;
  std::size_t num_heads = 8;
  std::vector<double> mask_scale_init{32, 32, 16, 16, 8, 8, 4, 4};
  std::size_t encoder_layers = 5;
  std::size_t decoder_layers = 2;
  std::size_t bg_grid = 3;
  // Frame size used for training and evaluation runs.
  std::size_t height = 64;
  std::size_t width = 64;
  bool catch_all = true;
  AttentionMode attention_mode = AttentionMode::soft;

  void validate() const;
  AttentionConfig attention() const { return {model_dim, num_heads, mask_scale_init}; }
  std::size_t bg_cells() const { return bg_grid * bg_grid; }

  // Consumes a known key; returns false for keys this struct does not own.
  bool set(const std::string& key, const std::string& value);
  KeyValues to_key_values() const;
  static ModelConfig from_text(const std::string& text);
};

// Copy of `config` without the catch-all logit channel.
ModelConfig ablate_catch_all(ModelConfig config);

struct FeaturePyramid {
  Tensor f8;  // [C x H/8 x W/8]
  Tensor f4;  // [C x H/4 x W/4]
};

struct DescriptorSet {
  Tensor foreground;  // [N_obj x C]
  Tensor background;  // [g^2 x C]
  std::size_t frame_index = 0;

  std::size_t num_objects() const { return foreground.dim(0); }
  // Foreground rows then background rows.
  Tensor stacked() const;
};

// Per-pixel channel probabilities: objects, then background cells, then the
// catch-all channel if enabled.
struct MaskSet {
  Tensor channels;  // [K x H x W]
  std::size_t num_objects = 0;
  std::size_t num_bg_cells = 0;
  bool has_catch_all = false;

  std::size_t num_channels() const { return channels.dim(0); }
  Tensor object_masks() const;
  // Objects and background cells, i.e. everything that is re-encoded.
  Tensor propagated_masks() const;
};

// Background map max(0, 1 - sum of objects) split over a g x g grid of
// axis-aligned cells. Cell extents are floor(H/g) with the remainder on the
// last row/column. Differentiable in the object masks. [N x H x W] -> [g^2 x H x W].
Tensor split_background_grid(const Tensor& object_masks, std::size_t grid);

// Row extents [begin, end) of the g cells along an axis of length n.
std::vector<std::size_t> grid_cuts(std::size_t n, std::size_t grid);

// Mask-weighted mean of token rows: out[n] = sum_p m[n,p] x[p] / (sum_p m[n,p] + eps).
// masks [N x P], tokens [P x C] -> [N x C].
Tensor masked_average_pool(const Tensor& masks, const Tensor& tokens, double eps = 1e-6);

// [C x h x w] -> [h*w x C] and back.
Tensor to_tokens(const Tensor& feature_map);
Tensor from_tokens(const Tensor& tokens, std::size_t height, std::size_t width);

// Pre-norm two-layer perceptron with residual: x + W2 relu(W1 LN(x) + b1) + b2.
class FeedForward {
 public:
  FeedForward() = default;
  FeedForward(const std::string& prefix, std::size_t dim, std::size_t hidden, Rng& rng,
              ParameterSet& params);
  Tensor forward(const Tensor& x) const;

 private:
  Tensor gamma_, beta_, w1_, b1_, w2_, b2_;
};

struct EncoderLayer {
  AttentionLayer cross;
  AttentionLayer self;
  FeedForward ffn;
};

struct DecoderLayer {
  AttentionLayer cross;
  FeedForward ffn;
};

class SegmentationModel {
 public:
  SegmentationModel(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  // image [3 x H x W], H and W multiples of 8.
  FeaturePyramid backbone(const Tensor& image) const;

  // Descriptors from masks [N_obj + g^2 x H x W] (objects then background
  // cells, no catch-all).
  DescriptorSet encode(const FeaturePyramid& features, const Tensor& masks,
                       std::size_t frame_index) const;
  // Objects only; the background cells are derived with split_background_grid.
  DescriptorSet encode_objects(const FeaturePyramid& features, const Tensor& object_masks,
                               std::size_t frame_index) const;

  // Channel logits at stride 4 before upsampling, [K x H/4 x W/4].
  Tensor decode_logits(const FeaturePyramid& features,
                       const std::vector<DescriptorSet>& history) const;
  MaskSet decode(const FeaturePyramid& features, const std::vector<DescriptorSet>& history) const;

  // (Q K^T + mask_scale M)/sqrt(d) of one encoder cross-attention head, computed
  // with the descriptors that enter that layer. [N_obj + g^2 x h*w].
  Tensor encoder_attention_logits(const FeaturePyramid& features, const Tensor& masks,
                                  std::size_t layer, std::size_t head) const;

  std::vector<Tensor> mask_scales() const;

 private:
  Tensor downsample_masks(const Tensor& masks, const Tensor& f8) const;

  ModelConfig config_;
  ParameterSet params_;
  Tensor conv1_w_, conv1_b_, conv2_w_, conv2_b_, conv3_w_, conv3_b_, conv4_w_, conv4_b_;
  Tensor tap_w_, tap_b_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Tensor fuse_w_, fuse_b_;
  Tensor bc1_w_, bc1_b_, bc2_w_, bc2_b_;
};

// Checkpoint: "MASKCK01", u64 config length, config text, u64 block count,
// then per block: u64 name length, name, u64 rank, u64 dims, f64 values.
// All integers and floats little-endian.
std::string serialize_checkpoint(const SegmentationModel& model);
SegmentationModel deserialize_checkpoint(const std::string& bytes);
void save_checkpoint(const SegmentationModel& model, const std::string& path);
SegmentationModel load_checkpoint(const std::string& path);

}  // namespace maskattn
