#include <gtest/gtest.h>

#include <cmath>

#include "maskattn/error.hpp"
#include "maskattn/gradcheck.hpp"
#include "maskattn/losses.hpp"
#include "maskattn/ops.hpp"
#include "maskattn/propagation.hpp"
#include "test_util.hpp"

namespace maskattn {
namespace {

using testing::max_abs_diff;
using testing::random_tensor;

ModelConfig tiny_config(std::size_t size = 16) {
  ModelConfig c;
  c.model_dim = 8;
  c.num_heads = 2;
  c.mask_scale_init = {4.0, 2.0};
  c.encoder_layers = 2;
  c.decoder_layers = 1;
  c.height = c.width = size;
  return c;
}

std::vector<Tensor> random_frames(std::size_t t, std::size_t h, std::size_t w, Rng& rng) {
  std::vector<Tensor> frames;
  for (std::size_t i = 0; i < t; ++i) frames.push_back(random_tensor({3, h, w}, rng, 0.0, 1.0));
  return frames;
}

Tensor two_boxes(std::size_t h, std::size_t w) {
  std::vector<double> m(2 * h * w, 0.0);
  for (std::size_t y = 1; y < h / 2; ++y)
    for (std::size_t x = 1; x < w / 2; ++x) m[y * w + x] = 1.0;
  for (std::size_t y = h / 2; y < h - 1; ++y)
    for (std::size_t x = w / 2; x < w - 1; ++x) m[h * w + y * w + x] = 1.0;
  return Tensor({2, h, w}, std::move(m));
}

DescriptorSet fake_entry(std::size_t frame, std::size_t n, std::size_t cells, std::size_t c) {
  return {Tensor::full({n, c}, static_cast<double>(frame)),
          Tensor::full({cells, c}, static_cast<double>(frame)), frame};
}

TEST(TemporalHistory, FifoEvictionAndCapacity) {
  TemporalHistory h(3);
  for (std::size_t f = 0; f < 10; ++f) {
    h.push(fake_entry(f, 2, 9, 4));
    ASSERT_LE(h.size(), 3u);
    const auto e = h.entries();
    for (std::size_t i = 0; i < e.size(); ++i) {
      EXPECT_EQ(e[i].frame_index, f + 1 - e.size() + i);
    }
  }
  EXPECT_EQ(h.newest().frame_index, 9u);
  EXPECT_THROW(TemporalHistory(0), ConfigError);
}

TEST(TemporalHistory, SerializedBytesPerFrame) {
  TemporalHistory h(4);
  EXPECT_EQ(h.bytes_per_frame(), 0u);
  h.push(fake_entry(0, 2, 9, 8));
  h.push(fake_entry(1, 2, 9, 8));
  EXPECT_EQ(h.bytes_per_frame(), (2u + 9u) * 8u * 8u);
  EXPECT_EQ(h.serialize().size(), 2 * h.bytes_per_frame());
}

TEST(TemporalHistory, BytesIndependentOfResolution) {
  std::size_t bytes[2];
  for (int k = 0; k < 2; ++k) {
    const std::size_t size = k == 0 ? 32 : 64;
    ModelConfig c = tiny_config(size);
    SegmentationModel model(c, 3);
    Rng rng(5);
    const auto frames = random_frames(4, size, size, rng);
    const ClipResult r = propagate_clip(model, frames, two_boxes(size, size), {2, false});
    TemporalHistory h(2);
    for (const auto& d : r.descriptors) h.push(d);
    bytes[k] = h.bytes_per_frame();
    EXPECT_EQ(h.serialize().size(), 2 * bytes[k]);
  }
  EXPECT_EQ(bytes[0], bytes[1]);
  EXPECT_EQ(bytes[0], (2u + 9u) * 8u * 8u);
}

TEST(Propagation, SingleFrameHoldsOnlyTheGivenMasks) {
  SegmentationModel model(tiny_config(), 1);
  Rng rng(2);
  const Tensor masks = two_boxes(16, 16);
  const ClipResult r = propagate_clip(model, random_frames(1, 16, 16, rng), masks, {});
  ASSERT_EQ(r.masks.size(), 1u);
  ASSERT_EQ(r.descriptors.size(), 1u);
  ASSERT_EQ(r.seconds.size(), 1u);
  EXPECT_EQ(max_abs_diff(r.masks[0].object_masks().data(), masks.data()), 0.0);
  EXPECT_EQ(r.masks[0].num_channels(), 2u + 9u + 1u);
}

TEST(Propagation, ListLengthsMatchClip) {
  SegmentationModel model(tiny_config(), 1);
  Rng rng(2);
  const ClipResult r = propagate_clip(model, random_frames(5, 16, 16, rng), two_boxes(16, 16), {});
  EXPECT_EQ(r.masks.size(), 5u);
  EXPECT_EQ(r.descriptors.size(), 5u);
  EXPECT_EQ(r.seconds.size(), 5u);
  for (std::size_t t = 0; t < 5; ++t) EXPECT_EQ(r.descriptors[t].frame_index, t);
}

TEST(Propagation, HistoryOfOneSeesOnlyThePreviousFrame) {
  SegmentationModel model(tiny_config(), 4);
  Rng rng(6);
  const auto frames = random_frames(4, 16, 16, rng);
  const ClipResult r = propagate_clip(model, frames, two_boxes(16, 16), {1, false});
  for (std::size_t t = 1; t < frames.size(); ++t) {
    const MaskSet expected = model.decode(model.backbone(frames[t]), {r.descriptors[t - 1]});
    EXPECT_EQ(max_abs_diff(expected.channels.data(), r.masks[t].channels.data()), 0.0);
  }
}

TEST(Propagation, LongerHistoryChangesLaterFrames) {
  SegmentationModel model(tiny_config(), 4);
  Rng rng(6);
  const auto frames = random_frames(4, 16, 16, rng);
  const ClipResult a = propagate_clip(model, frames, two_boxes(16, 16), {1, false});
  const ClipResult b = propagate_clip(model, frames, two_boxes(16, 16), {3, false});
  EXPECT_EQ(max_abs_diff(a.masks[1].channels.data(), b.masks[1].channels.data()), 0.0);
  EXPECT_GT(max_abs_diff(a.masks[3].channels.data(), b.masks[3].channels.data()), 0.0);
}

TEST(Propagation, Deterministic) {
  SegmentationModel model(tiny_config(), 8);
  Rng rng(9);
  const auto frames = random_frames(4, 16, 16, rng);
  const ClipResult a = propagate_clip(model, frames, two_boxes(16, 16), {2, false});
  const ClipResult b = propagate_clip(model, frames, two_boxes(16, 16), {2, false});
  for (std::size_t t = 0; t < 4; ++t) {
    EXPECT_EQ(max_abs_diff(a.masks[t].channels.data(), b.masks[t].channels.data()), 0.0);
  }
}

TEST(Propagation, DecodedMasksNormalize) {
  SegmentationModel model(tiny_config(), 8);
  Rng rng(9);
  const ClipResult r = propagate_clip(model, random_frames(3, 16, 16, rng), two_boxes(16, 16), {});
  for (std::size_t t = 1; t < 3; ++t) {
    const Tensor& ch = r.masks[t].channels;
    const std::size_t k = ch.dim(0), p = ch.dim(1) * ch.dim(2);
    for (std::size_t i = 0; i < p; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += ch[c * p + i];
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Propagation, Errors) {
  SegmentationModel model(tiny_config(), 1);
  Rng rng(2);
  EXPECT_THROW(propagate_clip(model, {}, two_boxes(16, 16), {}), UsageError);
  EXPECT_THROW(propagate_clip(model, random_frames(2, 16, 16, rng), two_boxes(8, 8), {}),
               DimensionError);
  auto frames = random_frames(2, 16, 16, rng);
  frames.push_back(random_tensor({3, 8, 8}, rng));
  EXPECT_THROW(propagate_clip(model, frames, two_boxes(16, 16), {}), DimensionError);
  EXPECT_THROW(propagate_clip(model, random_frames(2, 16, 16, rng), two_boxes(16, 16), {0, false}),
               ConfigError);
}

TEST(CyclicPass, TwoFramesDecodeOnceEachWay) {
  SegmentationModel model(tiny_config(), 1);
  Rng rng(2);
  const CyclicResult r = cyclic_pass(model, random_frames(2, 16, 16, rng), two_boxes(16, 16), {});
  EXPECT_EQ(r.forward.masks.size(), 2u);
  ASSERT_EQ(r.backward.masks.size(), 1u);
  EXPECT_EQ(r.backward.descriptors[0].frame_index, 0u);
  EXPECT_EQ(r.first_frame.channels.shape(), r.forward.masks[0].channels.shape());
  EXPECT_THROW(cyclic_pass(model, random_frames(1, 16, 16, rng), two_boxes(16, 16), {}),
               UsageError);
}

TEST(CyclicPass, ReturnTripStartsFromLastForwardEncoding) {
  SegmentationModel model(tiny_config(), 3);
  Rng rng(4);
  const auto frames = random_frames(3, 16, 16, rng);
  const CyclicResult r = cyclic_pass(model, frames, two_boxes(16, 16), {});
  ASSERT_EQ(r.backward.masks.size(), 2u);
  const MaskSet first_back = model.decode(model.backbone(frames[1]), {r.forward.descriptors[2]});
  EXPECT_EQ(max_abs_diff(first_back.channels.data(), r.backward.masks[0].channels.data()), 0.0);
}

struct CyclicGrads {
  double scale_norm = 0.0;
  double backbone_norm = 0.0;
  double intermediate_mask_norm = 0.0;
};

CyclicGrads cyclic_grads(SegmentationModel& model, const std::vector<Tensor>& frames, const Tensor& masks,
                         bool detach) {
  Graph::active().reset();
  model.params().zero_grad();
  const CyclicResult r = cyclic_pass(model, frames, masks, {7, detach});
  const ModelConfig& c = model.config();
  const Tensor loss =
      total_loss(r.first_frame, target_channels(masks, c.bg_grid, c.catch_all)).total;
  const Tensor intermediate = r.forward.masks[1].channels;
  backward(loss);
  CyclicGrads g;
  for (const Tensor& a : model.mask_scales())
    for (double v : a.grad()) g.scale_norm += v * v;
  for (const auto& p : model.params().items())
    if (p.name.rfind("backbone.", 0) == 0)
      for (double v : p.tensor.grad()) g.backbone_norm += v * v;
  for (double v : intermediate.grad()) g.intermediate_mask_norm += v * v;
  g.scale_norm = std::sqrt(g.scale_norm);
  g.backbone_norm = std::sqrt(g.backbone_norm);
  g.intermediate_mask_norm = std::sqrt(g.intermediate_mask_norm);
  return g;
}

TEST(CyclicPass, FirstFrameLossReachesMaskScaleBackboneAndIntermediateMasks) {
  SegmentationModel model(tiny_config(), 11);
  Rng rng(12);
  const auto frames = random_frames(2, 16, 16, rng);
  const CyclicGrads g = cyclic_grads(model, frames, two_boxes(16, 16), false);
  EXPECT_GT(g.scale_norm, 0.0);
  EXPECT_GT(g.backbone_norm, 0.0);
  EXPECT_GT(g.intermediate_mask_norm, 0.0);
}

TEST(CyclicPass, StopGradientZeroesIntermediateMaskGradient) {
  SegmentationModel model(tiny_config(), 11);
  Rng rng(12);
  const auto frames = random_frames(2, 16, 16, rng);
  const CyclicGrads full = cyclic_grads(model, frames, two_boxes(16, 16), false);
  const CyclicGrads cut = cyclic_grads(model, frames, two_boxes(16, 16), true);
  EXPECT_EQ(cut.intermediate_mask_norm, 0.0);
  EXPECT_LT(cut.intermediate_mask_norm, full.intermediate_mask_norm);
  // The ground-truth encoding of frame 0 still trains mask_scale and the backbone.
  EXPECT_GT(cut.scale_norm, 0.0);
  EXPECT_GT(cut.backbone_norm, 0.0);
}

TEST(CyclicPass, BackboneGradientMatchesFiniteDifferences) {
  SegmentationModel model(tiny_config(), 13);
  Rng rng(14);
  const auto frames = random_frames(2, 16, 16, rng);
  const Tensor masks = two_boxes(16, 16);
  const ModelConfig c = model.config();
  auto f = [&] {
    const CyclicResult r = cyclic_pass(model, frames, masks, {});
    return total_loss(r.first_frame, target_channels(masks, c.bg_grid, c.catch_all)).total;
  };
  std::vector<Tensor> spots{model.params().get("backbone.conv1.w").tensor,
                            model.params().get("backbone.conv4.w").tensor};
  const auto mask_scales = model.mask_scales();
  spots.insert(spots.end(), mask_scales.begin(), mask_scales.end());
  const GradCheckReport rep = finite_diff_check(f, spots, {1e-5, 6});
  EXPECT_LT(rep.max_rel_error, 1e-4) << "tensor " << rep.worst_tensor << " coord "
                                     << rep.worst_coord;
}

TEST(Throughput, RowsPerHistoryAndBoundedEntries) {
  ModelConfig c = tiny_config(32);
  SegmentationModel model(c, 1);
  Rng rng(2);
  const auto frames = random_frames(6, 32, 32, rng);
  const auto rows = throughput_probe(model, frames, two_boxes(32, 32), {1, 4}, 3);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].history, 1u);
  EXPECT_EQ(rows[0].max_history_entries, 1u);
  EXPECT_EQ(rows[1].max_history_entries, 4u);
  for (const auto& r : rows) {
    EXPECT_GT(r.frames_per_second, 0.0);
    EXPECT_EQ(r.history_bytes_per_frame, (2u + 9u) * 8u * 8u);
  }
  EXPECT_THROW(throughput_probe(model, frames, two_boxes(32, 32), {1}, 0), ConfigError);
}

}  // namespace
}  // namespace maskattn
