#include "maskattn/propagation.hpp"

#include <algorithm>
#include <bit>
#include <chrono>

#include "maskattn/error.hpp"
#include "maskattn/ops.hpp"

namespace maskattn {

TemporalHistory::TemporalHistory(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw ConfigError("history length must be at least 1");
}

void TemporalHistory::push(DescriptorSet entry) {
  entries_.push_back(std::move(entry));
  while (entries_.size() > capacity_) entries_.pop_front();
}

std::string TemporalHistory::serialize() const {
  std::string out;
  auto put = [&out](const Tensor& t) {
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
    }
  };
  for (const auto& e : entries_) {
    put(e.foreground);
    put(e.background);
  }
  return out;
}

std::size_t TemporalHistory::bytes_per_frame() const {
  if (entries_.empty()) return 0;
  const auto& e = entries_.back();
  return (e.foreground.numel() + e.background.numel()) * sizeof(double);
}

namespace {

void check_clip(const std::vector<Tensor>& frames, const Tensor& first_masks) {
  if (frames.empty()) throw UsageError("propagation: empty clip");
  const Shape& s = frames.front().shape();
  if (s.size() != 3 || s[0] != 3) {
    throw DimensionError("propagation: frame shape " + shape_to_string(s));
  }
  for (std::size_t t = 1; t < frames.size(); ++t) {
    if (frames[t].shape() != s) {
      throw DimensionError("propagation: frame " + std::to_string(t) + " has shape " +
                           shape_to_string(frames[t].shape()) + ", frame 0 " + shape_to_string(s));
    }
  }
  if (first_masks.rank() != 3 || first_masks.dim(1) != s[1] || first_masks.dim(2) != s[2]) {
    throw DimensionError("propagation: masks " + shape_to_string(first_masks.shape()) +
                         " for frames " + shape_to_string(s));
  }
}

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

// Decodes each frame in `order` from the running history and re-encodes it
// from its own prediction.
void run_frames(const SegmentationModel& model, const std::vector<Tensor>& frames,
                const std::vector<std::size_t>& order, const PropagationOptions& options,
                TemporalHistory& history, ClipResult& result) {
  for (std::size_t t : order) {
    const auto start = Clock::now();
    const FeaturePyramid features = model.backbone(frames[t]);
    MaskSet predicted = model.decode(features, history.entries());
    Tensor reencode = predicted.propagated_masks();
    if (options.detach_masks) reencode = reencode.detach();
    DescriptorSet d = model.encode(features, reencode, t);
    history.push(d);
    result.masks.push_back(std::move(predicted));
    result.descriptors.push_back(std::move(d));
    result.seconds.push_back(seconds_since(start));
  }
}

}  // namespace

MaskSet masks_as_maskset(const SegmentationModel& model, const Tensor& object_masks) {
  const ModelConfig& c = model.config();
  std::vector<Tensor> parts{object_masks, split_background_grid(object_masks, c.bg_grid)};
  if (c.catch_all) parts.push_back(Tensor::zeros({1, object_masks.dim(1), object_masks.dim(2)}));
  MaskSet out;
  out.channels = concat0(parts);
  out.num_objects = object_masks.dim(0);
  out.num_bg_cells = c.bg_cells();
  out.has_catch_all = c.catch_all;
  return out;
}

ClipResult propagate_clip(const SegmentationModel& model, const std::vector<Tensor>& frames,
                          const Tensor& first_masks, const PropagationOptions& options) {
  check_clip(frames, first_masks);
  TemporalHistory history(options.history);
  ClipResult result;

  const auto start = Clock::now();
  const FeaturePyramid features = model.backbone(frames[0]);
  DescriptorSet first = model.encode_objects(features, first_masks, 0);
  history.push(first);
  result.masks.push_back(masks_as_maskset(model, first_masks));
  result.descriptors.push_back(std::move(first));
  result.seconds.push_back(seconds_since(start));

  std::vector<std::size_t> order;
  for (std::size_t t = 1; t < frames.size(); ++t) order.push_back(t);
  run_frames(model, frames, order, options, history, result);
  return result;
}

CyclicResult cyclic_pass(const SegmentationModel& model, const std::vector<Tensor>& frames,
                         const Tensor& first_masks, const PropagationOptions& options) {
  if (frames.size() < 2) throw UsageError("cyclic pass needs at least 2 frames");
  CyclicResult out;
  out.forward = propagate_clip(model, frames, first_masks, options);

  // The return trip starts from the last frame's own encoding only.
  TemporalHistory history(options.history);
  history.push(out.forward.descriptors.back());
  std::vector<std::size_t> order;
  for (std::size_t t = frames.size() - 1; t-- > 0;) order.push_back(t);
  run_frames(model, frames, order, options, history, out.backward);
  out.first_frame = out.backward.masks.back();
  return out;
}

std::vector<ThroughputRow> throughput_probe(const SegmentationModel& model,
                                            const std::vector<Tensor>& frames,
                                            const Tensor& first_masks,
                                            const std::vector<std::size_t>& histories,
                                            std::size_t runs) {
  check_clip(frames, first_masks);
  if (runs == 0) throw ConfigError("throughput probe needs at least one run");
  NoGradGuard guard;
  std::vector<ThroughputRow> rows;
  for (std::size_t w : histories) {
    ThroughputRow row;
    row.history = w;
    std::vector<double> fps;
    for (std::size_t r = 0; r < runs; ++r) {
      TemporalHistory history(w);
      const auto start = Clock::now();
      FeaturePyramid features = model.backbone(frames[0]);
      history.push(model.encode_objects(features, first_masks, 0));
      for (std::size_t t = 1; t < frames.size(); ++t) {
        features = model.backbone(frames[t]);
        const MaskSet m = model.decode(features, history.entries());
        history.push(model.encode(features, m.propagated_masks(), t));
        row.max_history_entries = std::max(row.max_history_entries, history.size());
      }
      fps.push_back(static_cast<double>(frames.size()) / seconds_since(start));
      row.history_bytes_per_frame = history.bytes_per_frame();
    }
    std::sort(fps.begin(), fps.end());
    row.frames_per_second = fps.size() % 2 ? fps[fps.size() / 2]
                                           : 0.5 * (fps[fps.size() / 2 - 1] + fps[fps.size() / 2]);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace maskattn
