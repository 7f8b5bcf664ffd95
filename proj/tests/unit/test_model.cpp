#include <gtest/gtest.h>

#include <array>
#include <cmath>

#include "maskattn/error.hpp"
#include "maskattn/gradcheck.hpp"
#include "maskattn/model.hpp"
#include "maskattn/ops.hpp"
#include "test_util.hpp"

namespace maskattn {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;
using testing::scalarize;

ModelConfig tiny_config() {
  ModelConfig c;
  c.model_dim = 8;
  c.num_heads = 2;
  c.mask_scale_init = {4.0, 2.0};
  c.encoder_layers = 2;
  c.decoder_layers = 1;
  return c;
}

// Two soft objects whose per-pixel sum stays inside (0, 1).
Tensor soft_object_masks(std::size_t n, std::size_t h, std::size_t w, Rng& rng,
                         bool requires_grad = false) {
  return random_tensor({n, h, w}, rng, 0.02, 0.9 / static_cast<double>(n), requires_grad);
}

Tensor box_masks(std::size_t h, std::size_t w, const std::vector<std::array<std::size_t, 4>>& boxes) {
  std::vector<double> m(boxes.size() * h * w, 0.0);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto [y0, x0, y1, x1] = boxes[i];
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) m[i * h * w + y * w + x] = 1.0;
  }
  return Tensor({boxes.size(), h, w}, std::move(m));
}

TEST(ModelConfig, DefaultsAndValidation) {
  ModelConfig c;
  EXPECT_EQ(c.model_dim, 64u);
  EXPECT_EQ(c.num_heads, 8u);
  EXPECT_EQ(c.encoder_layers, 5u);
  EXPECT_EQ(c.decoder_layers, 2u);
  EXPECT_EQ(c.bg_grid, 3u);
  EXPECT_NO_THROW(c.validate());
  c.height = 36;
  EXPECT_THROW(c.validate(), ConfigError);
  c.height = 24;
  EXPECT_THROW(c.validate(), ConfigError);
  c.height = 32;
  c.model_dim = 60;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(ModelConfig, TextRoundTripAndUnknownKeys) {
  ModelConfig c = tiny_config();
  c.catch_all = false;
  c.attention_mode = AttentionMode::hard;
  c.mask_scale_init = {0.1, 3.0};
  const ModelConfig back = ModelConfig::from_text(format_key_values(c.to_key_values()));
  EXPECT_EQ(back.to_key_values(), c.to_key_values());
  EXPECT_EQ(back.mask_scale_init, c.mask_scale_init);
  EXPECT_THROW(ModelConfig::from_text("model_dim=8\nbogus=1\n"), ConfigError);
  EXPECT_THROW(ModelConfig::from_text("catch_all=maybe\n"), ConfigError);
}

TEST(ModelConfig, AblateCatchAllDropsOneChannel) {
  const ModelConfig on = tiny_config();
  const ModelConfig off = ablate_catch_all(on);
  EXPECT_FALSE(off.catch_all);
  Rng rng(1);
  const Tensor image = random_tensor({3, 32, 32}, rng, 0, 1);
  const Tensor masks = box_masks(32, 32, {{2, 2, 10, 10}, {20, 18, 30, 28}});
  const SegmentationModel a(on, 5), b(off, 5);
  const auto fa = a.backbone(image), fb = b.backbone(image);
  const MaskSet ma = a.decode(fa, {a.encode_objects(fa, masks, 0)});
  const MaskSet mb = b.decode(fb, {b.encode_objects(fb, masks, 0)});
  EXPECT_EQ(ma.num_channels(), 2u + 9u + 1u);
  EXPECT_EQ(mb.num_channels(), ma.num_channels() - 1);
  // Every parameter outside the catch-all head is initialized identically,
  // so the descriptor logits agree exactly.
  const Tensor la = a.decode_logits(fa, {a.encode_objects(fa, masks, 0)});
  const Tensor lb = b.decode_logits(fb, {b.encode_objects(fb, masks, 0)});
  const std::size_t plane = la.dim(1) * la.dim(2);
  for (std::size_t i = 0; i < lb.numel(); ++i) ASSERT_EQ(la[i], lb[i]);
  EXPECT_EQ(la.numel(), lb.numel() + plane);
}

TEST(Backbone, ZeroImageGivesZeroFeatures) {
  const SegmentationModel model(tiny_config(), 2);
  const auto f = model.backbone(Tensor::zeros({3, 32, 48}));
  EXPECT_EQ(f.f8.shape(), (Shape{8, 4, 6}));
  EXPECT_EQ(f.f4.shape(), (Shape{8, 8, 12}));
  for (double v : f.f8.data()) EXPECT_EQ(v, 0.0);
  for (double v : f.f4.data()) EXPECT_EQ(v, 0.0);
}

TEST(Backbone, RejectsBadGeometry) {
  const SegmentationModel model(tiny_config(), 2);
  EXPECT_THROW(model.backbone(Tensor::zeros({3, 30, 32})), DimensionError);
  EXPECT_THROW(model.backbone(Tensor::zeros({1, 32, 32})), DimensionError);
}

TEST(Backbone, InputGradientMatchesFiniteDifferences) {
  const SegmentationModel model(tiny_config(), 3);
  Rng rng(4);
  Tensor image = random_tensor({3, 16, 16}, rng, 0, 1, true);
  auto f = [&] {
    const auto fp = model.backbone(image);
    return add(scalarize(fp.f8, 1), scalarize(fp.f4, 2));
  };
  EXPECT_LT(finite_diff_check(f, {image}).max_rel_error, 1e-4);
}

TEST(BackgroundGrid, CutsPutRemainderLast) {
  EXPECT_EQ(grid_cuts(64, 3), (std::vector<std::size_t>{0, 21, 42, 64}));
  EXPECT_EQ(grid_cuts(6, 3), (std::vector<std::size_t>{0, 2, 4, 6}));
  EXPECT_THROW(grid_cuts(2, 3), ConfigError);
}

TEST(BackgroundGrid, EmptyObjectsTileTheFrame) {
  const Tensor cells = split_background_grid(Tensor::zeros({1, 7, 8}), 3);
  ASSERT_EQ(cells.shape(), (Shape{9, 7, 8}));
  const auto rows = grid_cuts(7, 3), cols = grid_cuts(8, 3);
  for (std::size_t gy = 0; gy < 3; ++gy)
    for (std::size_t gx = 0; gx < 3; ++gx)
      for (std::size_t y = 0; y < 7; ++y)
        for (std::size_t x = 0; x < 8; ++x) {
          const bool inside = y >= rows[gy] && y < rows[gy + 1] && x >= cols[gx] && x < cols[gx + 1];
          EXPECT_EQ(cells[(gy * 3 + gx) * 56 + y * 8 + x], inside ? 1.0 : 0.0);
        }
}

TEST(BackgroundGrid, FullCoverageGivesEmptyCells) {
  const Tensor cells = split_background_grid(box_masks(9, 9, {{0, 0, 9, 5}, {0, 5, 9, 9}}), 3);
  for (double v : cells.data()) EXPECT_EQ(v, 0.0);
}

TEST(BackgroundGrid, SixBySixOneBlockMatchesPixelLoop) {
  const Tensor obj = box_masks(6, 6, {{1, 1, 3, 3}});
  const Tensor cells = split_background_grid(obj, 3);
  for (std::size_t c = 0; c < 9; ++c)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 6; ++x) {
        const bool in_cell = y / 2 == c / 3 && x / 2 == c % 3;
        const bool in_obj = y >= 1 && y < 3 && x >= 1 && x < 3;
        EXPECT_EQ(cells[c * 36 + y * 6 + x], in_cell && !in_obj ? 1.0 : 0.0)
            << "cell " << c << " at " << y << "," << x;
      }
}

TEST(BackgroundGrid, CellsAreDisjointAndSumToBackgroundOnRandomMasks) {
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    Rng rng(derive_seed(seed, "grid"));
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const auto h = static_cast<std::size_t>(rng.uniform_int(3, 12));
    const auto w = static_cast<std::size_t>(rng.uniform_int(3, 12));
    const auto g = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const Tensor masks = random_tensor({n, h, w}, rng, 0, 0.7);
    const Tensor cells = split_background_grid(masks, g);
    const std::size_t plane = h * w;
    for (std::size_t p = 0; p < plane; ++p) {
      double total = 0.0;
      for (std::size_t i = 0; i < n; ++i) total += masks[i * plane + p];
      const double bg = std::clamp(1.0 - total, 0.0, 1.0);
      double cell_sum = 0.0;
      std::size_t nonzero = 0;
      for (std::size_t c = 0; c < g * g; ++c) {
        cell_sum += cells[c * plane + p];
        nonzero += cells[c * plane + p] != 0.0;
      }
      ASSERT_LE(nonzero, 1u);
      ASSERT_EQ(cell_sum, bg);
    }
  }
}

TEST(BackgroundGrid, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  Tensor masks = soft_object_masks(2, 7, 6, rng, true);
  auto f = [&] { return scalarize(split_background_grid(masks, 3), 3); };
  EXPECT_LT(finite_diff_check(f, {masks}).max_rel_error, 1e-6);
}

TEST(MaskedAveragePool, UniformMaskGivesSpatialMean) {
  Rng rng(6);
  const Tensor tokens = random_tensor({5, 3}, rng);
  const Tensor pooled = masked_average_pool(Tensor::full({1, 5}, 1.0), tokens);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t p = 0; p < 5; ++p) mean += tokens[p * 3 + c] / 5.0;
    EXPECT_NEAR(pooled[c], mean * 5.0 / (5.0 + 1e-6), 1e-15);
    EXPECT_NEAR(pooled[c], mean, 1e-6);
  }
}

TEST(MaskedAveragePool, OneHotAndHalfWeightedMasks) {
  const Tensor tokens({3, 2}, {1, 2, 3, 4, 5, 6});
  const Tensor masks({3, 3}, {0, 1, 0, 0.5, 0, 0.5, 0, 0, 0});
  const Tensor pooled = masked_average_pool(masks, tokens);
  EXPECT_NEAR(pooled[0], 3.0 / (1.0 + 1e-6), 1e-15);
  EXPECT_NEAR(pooled[1], 4.0 / (1.0 + 1e-6), 1e-15);
  EXPECT_NEAR(pooled[2], (0.5 * 1 + 0.5 * 5) / (1.0 + 1e-6), 1e-15);
  EXPECT_NEAR(pooled[3], (0.5 * 2 + 0.5 * 6) / (1.0 + 1e-6), 1e-15);
  EXPECT_EQ(pooled[4], 0.0);
  EXPECT_EQ(pooled[5], 0.0);
}

TEST(MaskedAveragePool, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(derive_seed(seed, "pool"));
    Tensor masks = random_tensor({3, 7}, rng, 0, 1, true);
    Tensor tokens = random_tensor({7, 4}, rng, -1, 1, true);
    auto f = [&] { return scalarize(masked_average_pool(masks, tokens), seed); };
    EXPECT_LT(finite_diff_check(f, {masks, tokens}).max_rel_error, 1e-6);
  }
}

TEST(Encode, ZeroLayersReturnsPooledDescriptors) {
  ModelConfig c = tiny_config();
  c.encoder_layers = 0;
  const SegmentationModel model(c, 7);
  Rng rng(8);
  const auto fp = model.backbone(random_tensor({3, 32, 32}, rng, 0, 1));
  const Tensor obj = box_masks(32, 32, {{0, 0, 8, 8}, {8, 16, 24, 32}});
  const DescriptorSet d = model.encode_objects(fp, obj, 3);
  EXPECT_EQ(d.frame_index, 3u);
  EXPECT_EQ(d.foreground.shape(), (Shape{2, 8}));
  EXPECT_EQ(d.background.shape(), (Shape{9, 8}));
  // Object 0 covers exactly the top-left stride-8 cell.
  for (std::size_t ch = 0; ch < 8; ++ch) {
    EXPECT_NEAR(d.foreground[ch], fp.f8[ch * 16] / (1.0 + 1e-6), 1e-14);
  }
}

TEST(Encode, IdenticalObjectsGetIdenticalDescriptors) {
  const SegmentationModel model(tiny_config(), 9);
  Rng rng(10);
  const auto fp = model.backbone(random_tensor({3, 32, 32}, rng, 0, 1));
  const Tensor one = box_masks(32, 32, {{4, 4, 20, 12}});
  const Tensor both = concat0({scale(one, 0.5), scale(one, 0.5)});
  const DescriptorSet d = model.encode_objects(fp, both, 0);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(d.foreground[c], d.foreground[8 + c]);
}

TEST(Encode, PermutingObjectsPermutesDescriptorsAndMasks) {
  const SegmentationModel model(tiny_config(), 11);
  Rng rng(12);
  const auto fp = model.backbone(random_tensor({3, 32, 32}, rng, 0, 1));
  const Tensor a = box_masks(32, 32, {{0, 0, 12, 12}}), b = box_masks(32, 32, {{16, 8, 30, 30}}),
               c = box_masks(32, 32, {{2, 20, 10, 30}});
  const DescriptorSet d1 = model.encode_objects(fp, concat0({a, b, c}), 0);
  const DescriptorSet d2 = model.encode_objects(fp, concat0({c, a, b}), 0);
  const std::size_t perm[3] = {1, 2, 0};  // row i of d1 is row perm[i] of d2
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 8; ++k)
      EXPECT_NEAR(d1.foreground[i * 8 + k], d2.foreground[perm[i] * 8 + k], 1e-12);
  EXPECT_LT(max_abs_diff(d1.background.data(), d2.background.data()), 1e-12);

  const MaskSet m1 = model.decode(fp, {d1}), m2 = model.decode(fp, {d2});
  const std::size_t plane = 32 * 32;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t p = 0; p < plane; ++p)
      EXPECT_NEAR(m1.channels[i * plane + p], m2.channels[perm[i] * plane + p], 1e-12);
  for (std::size_t p = 3 * plane; p < m1.channels.numel(); ++p)
    EXPECT_NEAR(m1.channels[p], m2.channels[p], 1e-12);
}

TEST(Encode, GradientToInputMasksMatchesFiniteDifferences) {
  const SegmentationModel model(tiny_config(), 13);
  Rng rng(14);
  const auto fp = model.backbone(random_tensor({3, 16, 16}, rng, 0, 1));
  Tensor masks = soft_object_masks(2, 16, 16, rng, true);
  auto f = [&] { return scalarize(model.encode_objects(fp, masks, 0).stacked(), 4); };
  const auto report = finite_diff_check(f, {masks});
  EXPECT_LT(report.max_rel_error, 1e-4);
  backward(f());
  double norm = 0.0;
  for (double g : masks.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
}

TEST(Encode, RejectsMissingBackgroundCells) {
  const SegmentationModel model(tiny_config(), 13);
  const auto fp = model.backbone(Tensor::zeros({3, 32, 32}));
  EXPECT_THROW(model.encode(fp, Tensor::zeros({9, 32, 32}), 0), DimensionError);
  EXPECT_THROW(model.encode(fp, Tensor::zeros({10, 16, 16}), 0), DimensionError);
}

class DecodeFixture : public ::testing::Test {
 protected:
  DecodeFixture() : model_(tiny_config(), 15), rng_(16) {
    features_ = model_.backbone(random_tensor({3, 32, 32}, rng_, 0, 1));
    masks_ = box_masks(32, 32, {{3, 3, 14, 14}, {18, 10, 29, 25}});
  }
  SegmentationModel model_;
  Rng rng_;
  FeaturePyramid features_;
  Tensor masks_;
};

TEST_F(DecodeFixture, ChannelsSumToOne) {
  const DescriptorSet d = model_.encode_objects(features_, masks_, 0);
  const MaskSet m = model_.decode(features_, {d});
  ASSERT_EQ(m.num_channels(), 12u);
  EXPECT_EQ(m.num_objects, 2u);
  EXPECT_EQ(m.num_bg_cells, 9u);
  EXPECT_TRUE(m.has_catch_all);
  const std::size_t plane = 32 * 32;
  for (std::size_t p = 0; p < plane; ++p) {
    double total = 0.0;
    for (std::size_t c = 0; c < 12; ++c) {
      const double v = m.channels[c * plane + p];
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      total += v;
    }
    EXPECT_NEAR(total, 1.0, 1e-9);
  }
}

TEST_F(DecodeFixture, RepeatedHistoryMatchesSingleEntry) {
  const DescriptorSet d = model_.encode_objects(features_, masks_, 0);
  const MaskSet one = model_.decode(features_, {d});
  const MaskSet four = model_.decode(features_, {d, d, d, d});
  EXPECT_LT(max_abs_diff(one.channels.data(), four.channels.data()), 1e-12);
}

TEST_F(DecodeFixture, HistoryContractErrors) {
  EXPECT_THROW(model_.decode(features_, {}), UsageError);
  const DescriptorSet two = model_.encode_objects(features_, masks_, 0);
  const DescriptorSet one = model_.encode_objects(features_, slice0(masks_, 0, 1), 1);
  EXPECT_THROW(model_.decode(features_, {two, one}), ContractError);
}

TEST_F(DecodeFixture, AttentionLogitExportChecksRange) {
  const Tensor all = concat0({masks_, split_background_grid(masks_, 3)});
  const Tensor logits = model_.encoder_attention_logits(features_, all, 1, 1);
  EXPECT_EQ(logits.shape(), (Shape{11, 16}));
  EXPECT_THROW(model_.encoder_attention_logits(features_, all, 2, 0), UsageError);
  EXPECT_THROW(model_.encoder_attention_logits(features_, all, 0, 2), UsageError);
}

TEST(EndToEnd, DecodedMasksAreDifferentiableInInputMasks) {
  const SegmentationModel model(tiny_config(), 17);
  Rng rng(18);
  const Tensor image = random_tensor({3, 16, 16}, rng, 0, 1);
  const Tensor next = random_tensor({3, 16, 16}, rng, 0, 1);
  Tensor masks = soft_object_masks(2, 16, 16, rng, true);
  auto f = [&] {
    const auto fp = model.backbone(image);
    const DescriptorSet d = model.encode_objects(fp, masks, 0);
    return scalarize(model.decode(model.backbone(next), {d}).channels, 5);
  };
  const auto report = finite_diff_check(f, {masks});
  EXPECT_LT(report.max_rel_error, 1e-3);
  EXPECT_EQ(report.coords_checked, masks.numel());
}

TEST(Checkpoint, RoundTripIsExact) {
  ModelConfig c = tiny_config();
  c.catch_all = false;
  const SegmentationModel model(c, 19);
  const std::string bytes = serialize_checkpoint(model);
  EXPECT_EQ(bytes.substr(0, 8), "MASKCK01");
  const SegmentationModel back = deserialize_checkpoint(bytes);
  EXPECT_EQ(back.config().to_key_values(), c.to_key_values());
  ASSERT_EQ(back.params().items().size(), model.params().items().size());
  for (std::size_t i = 0; i < model.params().items().size(); ++i) {
    const auto& a = model.params().items()[i];
    const auto& b = back.params().items()[i];
    EXPECT_EQ(a.name, b.name);
    EXPECT_EQ(a.lower_bound, b.lower_bound);
    ASSERT_EQ(a.tensor.numel(), b.tensor.numel());
    for (std::size_t k = 0; k < a.tensor.numel(); ++k) ASSERT_EQ(a.tensor[k], b.tensor[k]);
  }
  EXPECT_EQ(serialize_checkpoint(back), bytes);
}

TEST(Checkpoint, RejectsBadMagicAndTruncation) {
  const std::string bytes = serialize_checkpoint(SegmentationModel(tiny_config(), 20));
  std::string bad = bytes;
  bad[3] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad), IoError);
  for (std::size_t cut : {std::size_t{4}, std::size_t{12}, std::size_t{40}, bytes.size() / 2,
                          bytes.size() - 1}) {
    EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, cut)), IoError) << "cut at " << cut;
  }
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), IoError);
}

TEST(Checkpoint, SameSeedSameBytes) {
  EXPECT_EQ(serialize_checkpoint(SegmentationModel(tiny_config(), 21)),
            serialize_checkpoint(SegmentationModel(tiny_config(), 21)));
  EXPECT_NE(serialize_checkpoint(SegmentationModel(tiny_config(), 21)),
            serialize_checkpoint(SegmentationModel(tiny_config(), 22)));
}

}  // namespace
}  // namespace maskattn
