#pragma once

#include <cstddef>
#include <deque>
#include <string>
#include <vector>

#include "maskattn/model.hpp"

namespace maskattn {

// FIFO of the descriptor sets of the last `capacity` frames. Nothing but
// descriptors is retained.
class TemporalHistory {
 public:
  explicit TemporalHistory(std::size_t capacity);

  void push(DescriptorSet entry);
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::vector<DescriptorSet> entries() const { return {entries_.begin(), entries_.end()}; }
  const DescriptorSet& newest() const { return entries_.back(); }

  // Raw little-endian doubles of every retained descriptor, oldest first.
  std::string serialize() const;
  // Serialized size of one retained frame.
  std::size_t bytes_per_frame() const;

 private:
  std::size_t capacity_;
  std::deque<DescriptorSet> entries_;
};

struct PropagationOptions {
  std::size_t history = 7;
  // Cut the gradient between a frame's predicted masks and its re-encoding.
  bool detach_masks = false;
};

struct ClipResult {
  // Frame 0 holds the given masks laid out as a MaskSet (zero catch-all).
  std::vector<MaskSet> masks;
  std::vector<DescriptorSet> descriptors;
  std::vector<double> seconds;
};

// frames: [3 x H x W] each; first_masks: [N_obj x H x W] in [0, 1].
ClipResult propagate_clip(const SegmentationModel& model, const std::vector<Tensor>& frames,
                          const Tensor& first_masks, const PropagationOptions& options);

struct CyclicResult {
  MaskSet first_frame;  // prediction for frame 0 after going 0 -> T-1 -> 0
  ClipResult forward;
  // Frames T-2 down to 0, in processing order.
  ClipResult backward;
};

CyclicResult cyclic_pass(const SegmentationModel& model, const std::vector<Tensor>& frames,
                         const Tensor& first_masks, const PropagationOptions& options);

struct ThroughputRow {
  std::size_t history = 0;
  double frames_per_second = 0.0;
  std::size_t history_bytes_per_frame = 0;
  std::size_t max_history_entries = 0;
};

// Median over `runs` timed propagations per history length, without gradients.
std::vector<ThroughputRow> throughput_probe(const SegmentationModel& model,
                                            const std::vector<Tensor>& frames,
                                            const Tensor& first_masks,
                                            const std::vector<std::size_t>& histories,
                                            std::size_t runs = 5);

// Given object masks as a MaskSet: objects, grid cells, and a zero catch-all
// channel when the model has one.
MaskSet masks_as_maskset(const SegmentationModel& model, const Tensor& object_masks);

}  // namespace maskattn
