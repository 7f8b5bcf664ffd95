#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "maskattn/data.hpp"
#include "maskattn/model.hpp"

namespace maskattn {

enum class Regime { fake_sequence, cyclic };

std::string to_string(Regime regime);
Regime parse_regime(const std::string& text);

struct TrainConfig {
  ModelConfig model;
  std::size_t iterations = 2000;
  std::size_t warmup_iters = 200;
  double peak_lr = 1e-4;
  std::size_t decay_iter = 1500;
  double decayed_lr = 1e-5;
  std::size_t clip_length = 3;
  std::size_t history = 7;
  std::uint64_t seed = 0;
  Regime regime = Regime::fake_sequence;
  std::size_t objects = 2;
  // Extra checkpoint every this many iterations; 0 writes only the final one.
  std::size_t checkpoint_every = 0;
  // Cut gradients between a frame's predicted masks and its re-encoding.
  bool detach_masks = false;
  AugmentationRanges augmentation;

  void validate() const;
  bool set(const std::string& key, const std::string& value);
  KeyValues to_key_values() const;
  std::string to_text() const;
  // Unknown keys are rejected; unspecified keys keep their defaults.
  static TrainConfig from_text(const std::string& text);
  // Sets `iterations` and pulls warmup/decay down to it when they exceed it.
  void set_iterations(std::size_t n);
};

// Linear warm-up from 0 to peak_lr over warmup_iters, peak_lr until
// decay_iter, decayed_lr afterwards.
double lr_at(std::size_t iter, const TrainConfig& config);

// Supplies the training clip of an iteration.
using DataSource = std::function<Clip(std::uint64_t iteration)>;

// Fresh synthetic scene per iteration, turned into a fake sequence.
DataSource synthetic_source(const TrainConfig& config);
// Random windows (cyclic) or random labelled frames made into fake sequences.
DataSource clip_source(std::vector<Clip> clips, const TrainConfig& config);

// Held-out synthetic fake sequences drawn from a seed stream separate from
// training. `length` 0 means config.clip_length.
std::vector<Clip> synthetic_eval_clips(const TrainConfig& config, std::size_t count,
                                       std::uint64_t seed, std::size_t length = 0);

struct MetricsRow {
  std::size_t iter = 0;
  double lr = 0.0;
  double loss = 0.0;
  double cross_entropy = 0.0;
  double dice = 0.0;
  double grad_norm = 0.0;
};

std::string metrics_csv(const std::vector<MetricsRow>& rows);

struct TrainOutputs {
  // When non-empty: checkpoint.bin, metrics.csv, config.txt and periodic
  // checkpoint_<iter>.bin are written here.
  std::string dir;
  std::ostream* progress = nullptr;
  std::size_t progress_every = 100;
};

struct TrainResult {
  SegmentationModel model;
  std::vector<MetricsRow> rows;
};

// Loss of one clip under the configured regime, recorded on the active graph.
struct ClipLoss {
  Tensor total;
  double cross_entropy = 0.0;
  double dice = 0.0;
};
ClipLoss clip_loss(const SegmentationModel& model, const Clip& clip, const TrainConfig& config);

TrainResult train(const TrainConfig& config, const DataSource& data, const TrainOutputs& outputs = {});

}  // namespace maskattn
