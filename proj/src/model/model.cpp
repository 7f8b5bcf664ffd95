#include "maskattn/model.hpp"

#include <algorithm>
#include <cmath>

#include "maskattn/error.hpp"
#include "maskattn/ops.hpp"

namespace maskattn {

using detail::ImplPtr;
using detail::TensorImpl;

void ModelConfig::validate() const {
  attention().validate();
  if (bg_grid == 0) throw ConfigError("bg_grid must be positive");
  if (height % 8 != 0 || width % 8 != 0 || height < 32 || width < 32) {
    throw ConfigError("frame size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be multiples of 8 and at least 32");
  }
}

bool ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "model_dim") model_dim = parse_count(key, value);
  else if (key == "num_heads") num_heads = parse_count(key, value);
  else if (key == "mask_scale_init") mask_scale_init = parse_real_list(key, value);
  else if (key == "encoder_layers") encoder_layers = parse_count(key, value);
  else if (key == "decoder_layers") decoder_layers = parse_count(key, value);
  else if (key == "bg_grid") bg_grid = parse_count(key, value);
  else if (key == "height") height = parse_count(key, value);
  else if (key == "width") width = parse_count(key, value);
  else if (key == "catch_all") catch_all = parse_switch(key, value);
  else if (key == "attention_mode") attention_mode = parse_attention_mode(value);
  else return false;
  return true;
}

KeyValues ModelConfig::to_key_values() const {
  return {
      {"model_dim", std::to_string(model_dim)},
      {"num_heads", std::to_string(num_heads)},
      {"mask_scale_init", format_real_list(mask_scale_init)},
      {"encoder_layers", std::to_string(encoder_layers)},
      {"decoder_layers", std::to_string(decoder_layers)},
      {"bg_grid", std::to_string(bg_grid)},
      {"height", std::to_string(height)},
      {"width", std::to_string(width)},
      {"catch_all", catch_all ? "on" : "off"},
      {"attention_mode", to_string(attention_mode)},
  };
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig config;
  for (const auto& [key, value] : parse_key_values(text)) {
    if (!config.set(key, value)) throw ConfigError("unknown model key '" + key + "'");
  }
  config.validate();
  return config;
}

ModelConfig ablate_catch_all(ModelConfig config) {
  config.catch_all = false;
  return config;
}

Tensor DescriptorSet::stacked() const { return concat0({foreground, background}); }

Tensor MaskSet::object_masks() const { return slice0(channels, 0, num_objects); }

Tensor MaskSet::propagated_masks() const {
  return slice0(channels, 0, num_objects + num_bg_cells);
}

std::vector<std::size_t> grid_cuts(std::size_t n, std::size_t grid) {
  if (grid == 0 || grid > n) {
    throw ConfigError("grid of " + std::to_string(grid) + " cells over " + std::to_string(n) +
                      " pixels");
  }
  const std::size_t step = n / grid;
  std::vector<std::size_t> cuts(grid + 1);
  for (std::size_t i = 0; i < grid; ++i) cuts[i] = i * step;
  cuts[grid] = n;
  return cuts;
}

Tensor split_background_grid(const Tensor& object_masks, std::size_t grid) {
  if (object_masks.rank() != 3) {
    throw DimensionError("split_background_grid: expected [N x H x W], got " +
                         shape_to_string(object_masks.shape()));
  }
  const std::size_t n = object_masks.dim(0), h = object_masks.dim(1), w = object_masks.dim(2);
  const std::size_t plane = h * w;
  const auto rows = grid_cuts(h, grid), cols = grid_cuts(w, grid);
  const auto src = object_masks.data();

  // Cell index per pixel and whether the clamp is inactive there.
  std::vector<std::size_t> cell(plane);
  std::vector<unsigned char> interior(plane);
  std::vector<double> out(grid * grid * plane, 0.0);
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx)
      for (std::size_t y = rows[gy]; y < rows[gy + 1]; ++y)
        for (std::size_t x = cols[gx]; x < cols[gx + 1]; ++x) cell[y * w + x] = gy * grid + gx;
  for (std::size_t p = 0; p < plane; ++p) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) total += src[i * plane + p];
    const double bg = 1.0 - total;
    interior[p] = bg > 0.0 && bg < 1.0;
    out[cell[p] * plane + p] = std::clamp(bg, 0.0, 1.0);
  }
  ImplPtr im = object_masks.impl();
  return Graph::active().record(
      {grid * grid, h, w}, std::move(out), {&object_masks},
      [im, n, plane, cell = std::move(cell), interior = std::move(interior)](const TensorImpl& o) {
        double* g = grad_target(im);
        if (!g) return;
        for (std::size_t p = 0; p < plane; ++p) {
          if (!interior[p]) continue;
          const double up = o.grad[cell[p] * plane + p];
          for (std::size_t i = 0; i < n; ++i) g[i * plane + p] -= up;
        }
      });
}

Tensor masked_average_pool(const Tensor& masks, const Tensor& tokens, double eps) {
  if (masks.rank() != 2 || tokens.rank() != 2 || masks.dim(1) != tokens.dim(0)) {
    throw DimensionError("masked_average_pool: masks " + shape_to_string(masks.shape()) +
                         ", tokens " + shape_to_string(tokens.shape()));
  }
  const std::size_t n = masks.dim(0), p = masks.dim(1), c = tokens.dim(1);
  const auto m = masks.data();
  const auto x = tokens.data();
  std::vector<double> denom(n), out(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
      const double wgt = m[i * p + j];
      s += wgt;
      if (wgt == 0.0) continue;
      for (std::size_t t = 0; t < c; ++t) out[i * c + t] += wgt * x[j * c + t];
    }
    denom[i] = s + eps;
    for (std::size_t t = 0; t < c; ++t) out[i * c + t] /= denom[i];
  }
  ImplPtr im = masks.impl(), ix = tokens.impl();
  return Graph::active().record(
      {n, c}, out, {&masks, &tokens},
      [im, ix, n, p, c, denom, out](const TensorImpl& o) {
        const auto& m = im->data;
        const auto& x = ix->data;
        if (double* g = grad_target(im)) {
          for (std::size_t i = 0; i < n; ++i) {
            // d out_i / d m_ij = (x_j - out_i) / denom_i
            double base = 0.0;
            for (std::size_t t = 0; t < c; ++t) base += o.grad[i * c + t] * out[i * c + t];
            for (std::size_t j = 0; j < p; ++j) {
              double dot = 0.0;
              for (std::size_t t = 0; t < c; ++t) dot += o.grad[i * c + t] * x[j * c + t];
              g[i * p + j] += (dot - base) / denom[i];
            }
          }
        }
        if (double* g = grad_target(ix)) {
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < p; ++j) {
              const double wgt = m[i * p + j] / denom[i];
              if (wgt == 0.0) continue;
              for (std::size_t t = 0; t < c; ++t) g[j * c + t] += wgt * o.grad[i * c + t];
            }
        }
      });
}

Tensor to_tokens(const Tensor& feature_map) {
  if (feature_map.rank() != 3) {
    throw DimensionError("to_tokens: expected [C x H x W], got " +
                         shape_to_string(feature_map.shape()));
  }
  const std::size_t c = feature_map.dim(0);
  return transpose(reshape(feature_map, {c, feature_map.dim(1) * feature_map.dim(2)}));
}

Tensor from_tokens(const Tensor& tokens, std::size_t height, std::size_t width) {
  if (tokens.rank() != 2 || tokens.dim(0) != height * width) {
    throw DimensionError("from_tokens: " + shape_to_string(tokens.shape()) + " to " +
                         std::to_string(height) + "x" + std::to_string(width));
  }
  return reshape(transpose(tokens), {tokens.dim(1), height, width});
}

FeedForward::FeedForward(const std::string& prefix, std::size_t dim, std::size_t hidden, Rng& rng,
                         ParameterSet& params) {
  gamma_ = params.add(prefix + ".norm.gamma", Tensor::full({dim}, 1.0, true));
  beta_ = params.add(prefix + ".norm.beta", Tensor::zeros({dim}, true));
  w1_ = params.add(prefix + ".w1", uniform_init({dim, hidden}, std::sqrt(6.0 / dim), rng));
  b1_ = params.add(prefix + ".b1", Tensor::zeros({hidden}, true));
  w2_ = params.add(prefix + ".w2", uniform_init({hidden, dim}, std::sqrt(3.0 / hidden), rng));
  b2_ = params.add(prefix + ".b2", Tensor::zeros({dim}, true));
}

Tensor FeedForward::forward(const Tensor& x) const {
  const Tensor h = relu(linear(layer_norm(x, gamma_, beta_), w1_, b1_));
  return add(x, linear(h, w2_, b2_));
}

namespace {

constexpr std::size_t kStem1 = 16;
constexpr std::size_t kStem2 = 32;
constexpr std::size_t kCatchAllHidden = 16;

Tensor conv_weight(ParameterSet& params, const std::string& name, std::size_t out, std::size_t in,
                   std::size_t k, double gain, Rng& rng) {
  return params.add(name, uniform_init({out, in, k, k}, std::sqrt(gain / (in * k * k)), rng));
}

Tensor zero_bias(ParameterSet& params, const std::string& name, std::size_t n) {
  return params.add(name, Tensor::zeros({n}, true));
}

}  // namespace

SegmentationModel::SegmentationModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.attention().validate();
  if (config_.bg_grid == 0) throw ConfigError("bg_grid must be positive");
  Rng rng(derive_seed(seed, "model-init"));
  const std::size_t c = config_.model_dim;

  conv1_w_ = conv_weight(params_, "backbone.conv1.w", kStem1, 3, 3, 6.0, rng);
  conv1_b_ = zero_bias(params_, "backbone.conv1.b", kStem1);
  conv2_w_ = conv_weight(params_, "backbone.conv2.w", kStem2, kStem1, 3, 6.0, rng);
  conv2_b_ = zero_bias(params_, "backbone.conv2.b", kStem2);
  tap_w_ = conv_weight(params_, "backbone.tap4.w", c, kStem2, 1, 3.0, rng);
  tap_b_ = zero_bias(params_, "backbone.tap4.b", c);
  conv3_w_ = conv_weight(params_, "backbone.conv3.w", c, kStem2, 3, 6.0, rng);
  conv3_b_ = zero_bias(params_, "backbone.conv3.b", c);
  conv4_w_ = conv_weight(params_, "backbone.conv4.w", c, c, 3, 3.0, rng);
  conv4_b_ = zero_bias(params_, "backbone.conv4.b", c);

  const AttentionConfig attn = config_.attention();
  for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    EncoderLayer layer;
    layer.cross = AttentionLayer(p + ".cross", attn, rng, params_);
    layer.self = AttentionLayer(p + ".self", attn, rng, params_);
    layer.ffn = FeedForward(p + ".ffn", c, 2 * c, rng, params_);
    encoder_.push_back(std::move(layer));
  }
  for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    DecoderLayer layer;
    layer.cross = AttentionLayer(p + ".cross", attn, rng, params_);
    layer.ffn = FeedForward(p + ".ffn", c, 2 * c, rng, params_);
    decoder_.push_back(std::move(layer));
  }
  fuse_w_ = conv_weight(params_, "decoder.fuse.w", c, c, 3, 3.0, rng);
  fuse_b_ = zero_bias(params_, "decoder.fuse.b", c);
  // Registered last so that disabling the catch-all leaves every other
  // parameter's initial value unchanged.
  if (config_.catch_all) {
    bc1_w_ = conv_weight(params_, "decoder.catch_all.conv3.w", kCatchAllHidden, c, 3, 3.0, rng);
    bc1_b_ = zero_bias(params_, "decoder.catch_all.conv3.b", kCatchAllHidden);
    bc2_w_ = conv_weight(params_, "decoder.catch_all.conv1.w", 1, kCatchAllHidden, 1, 3.0, rng);
    bc2_b_ = zero_bias(params_, "decoder.catch_all.conv1.b", 1);
  }
}

FeaturePyramid SegmentationModel::backbone(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError("backbone: expected [3 x H x W], got " + shape_to_string(image.shape()));
  }
  if (image.dim(1) % 8 != 0 || image.dim(2) % 8 != 0) {
    throw DimensionError("backbone: frame " + shape_to_string(image.shape()) +
                         " is not a multiple of 8");
  }
  const Conv2dOptions down{2, 1}, same{1, 1};
  const Tensor x1 = relu(conv2d(image, conv1_w_, conv1_b_, down));
  const Tensor x2 = relu(conv2d(x1, conv2_w_, conv2_b_, down));
  FeaturePyramid out;
  out.f4 = conv2d(x2, tap_w_, tap_b_);
  const Tensor x3 = relu(conv2d(x2, conv3_w_, conv3_b_, down));
  out.f8 = conv2d(x3, conv4_w_, conv4_b_, same);
  return out;
}

Tensor SegmentationModel::downsample_masks(const Tensor& masks, const Tensor& f8) const {
  if (masks.rank() != 3 || masks.dim(1) != 8 * f8.dim(1) || masks.dim(2) != 8 * f8.dim(2)) {
    throw DimensionError("masks " + shape_to_string(masks.shape()) + " do not match features " +
                         shape_to_string(f8.shape()));
  }
  return reshape(avg_pool(masks, 8), {masks.dim(0), f8.dim(1) * f8.dim(2)});
}

DescriptorSet SegmentationModel::encode(const FeaturePyramid& features, const Tensor& masks,
                                 std::size_t frame_index) const {
  const std::size_t cells = config_.bg_cells();
  if (masks.rank() != 3 || masks.dim(0) <= cells) {
    throw DimensionError("encode: expected objects plus " + std::to_string(cells) +
                         " background cells, got " + shape_to_string(masks.shape()));
  }
  const Tensor tokens = to_tokens(features.f8);
  const Tensor m = downsample_masks(masks, features.f8);
  Tensor d = masked_average_pool(m, tokens);
  for (const auto& layer : encoder_) {
    d = layer.cross.forward(d, tokens, m, config_.attention_mode);
    d = layer.self.forward_self(d);
    d = layer.ffn.forward(d);
  }
  const std::size_t n_obj = masks.dim(0) - cells;
  return {slice0(d, 0, n_obj), slice0(d, n_obj, n_obj + cells), frame_index};
}

DescriptorSet SegmentationModel::encode_objects(const FeaturePyramid& features,
                                         const Tensor& object_masks,
                                         std::size_t frame_index) const {
  const Tensor all = concat0({object_masks, split_background_grid(object_masks, config_.bg_grid)});
  return encode(features, all, frame_index);
}

Tensor SegmentationModel::encoder_attention_logits(const FeaturePyramid& features, const Tensor& masks,
                                            std::size_t layer, std::size_t head) const {
  if (layer >= encoder_.size()) {
    throw UsageError("encoder layer " + std::to_string(layer) + " out of range (" +
                     std::to_string(encoder_.size()) + " layers)");
  }
  NoGradGuard guard;
  const Tensor tokens = to_tokens(features.f8);
  const Tensor m = downsample_masks(masks, features.f8);
  Tensor d = masked_average_pool(m, tokens);
  for (std::size_t l = 0; l < layer; ++l) {
    d = encoder_[l].cross.forward(d, tokens, m, config_.attention_mode);
    d = encoder_[l].self.forward_self(d);
    d = encoder_[l].ffn.forward(d);
  }
  return encoder_[layer].cross.export_logits(d, tokens, m, head);
}

Tensor SegmentationModel::decode_logits(const FeaturePyramid& features,
                                 const std::vector<DescriptorSet>& history) const {
  if (history.empty()) throw UsageError("decode: empty descriptor history");
  const std::size_t n_obj = history.front().num_objects();
  std::vector<Tensor> stacked;
  for (const auto& entry : history) {
    if (entry.num_objects() != n_obj || entry.background.dim(0) != config_.bg_cells()) {
      throw ContractError("decode: history entry for frame " + std::to_string(entry.frame_index) +
                          " has " + std::to_string(entry.num_objects()) + "+" +
                          std::to_string(entry.background.dim(0)) + " descriptors, expected " +
                          std::to_string(n_obj) + "+" + std::to_string(config_.bg_cells()));
    }
    stacked.push_back(entry.stacked());
  }
  const std::size_t h8 = features.f8.dim(1), w8 = features.f8.dim(2);
  const Tensor keys = stacked.size() == 1 ? stacked.front() : concat0(stacked);
  Tensor x = to_tokens(features.f8);
  for (const auto& layer : decoder_) {
    x = layer.cross.forward(x, keys, Tensor(), AttentionMode::none);
    x = layer.ffn.forward(x);
  }
  const Tensor f8_refined = from_tokens(x, h8, w8);
  const Tensor f4_refined =
      conv2d(add(features.f4, upsample_bilinear(f8_refined, 2)), fuse_w_, fuse_b_, {1, 1});

  // The mean of per-frame dot-product maps equals the dot product with the
  // mean descriptor.
  const Tensor mean_desc = stacked.size() == 1 ? stacked.front() : average(stacked);
  const std::size_t c = config_.model_dim, h4 = f4_refined.dim(1), w4 = f4_refined.dim(2);
  Tensor logits = reshape(matmul(mean_desc, reshape(f4_refined, {c, h4 * w4})),
                          {mean_desc.dim(0), h4, w4});
  if (config_.catch_all) {
    const Tensor hidden = conv2d(f4_refined, bc1_w_, bc1_b_, {1, 1});
    logits = concat0({logits, conv2d(hidden, bc2_w_, bc2_b_)});
  }
  return logits;
}

MaskSet SegmentationModel::decode(const FeaturePyramid& features,
                           const std::vector<DescriptorSet>& history) const {
  MaskSet out;
  out.channels = softmax(upsample_bilinear(decode_logits(features, history), 4), 0);
  out.num_objects = history.front().num_objects();
  out.num_bg_cells = config_.bg_cells();
  out.has_catch_all = config_.catch_all;
  return out;
}

std::vector<Tensor> SegmentationModel::mask_scales() const {
  std::vector<Tensor> out;
  for (const auto& layer : encoder_)
    for (const auto& a : layer.cross.mask_scales()) out.push_back(a);
  return out;
}

}  // namespace maskattn
