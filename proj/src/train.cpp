#include "maskattn/train.hpp"

#include <cmath>
#include <filesystem>
#include <sstream>

#include "maskattn/error.hpp"
#include "maskattn/losses.hpp"
#include "maskattn/ops.hpp"
#include "maskattn/optim.hpp"
#include "maskattn/propagation.hpp"

namespace fs = std::filesystem;

namespace maskattn {

std::string to_string(Regime regime) {
  return regime == Regime::fake_sequence ? "fake_sequence" : "cyclic";
}

Regime parse_regime(const std::string& text) {
  if (text == "fake_sequence" || text == "fake") return Regime::fake_sequence;
  if (text == "cyclic") return Regime::cyclic;
  throw ConfigError("unknown regime '" + text + "' (expected fake_sequence|cyclic)");
}

void TrainConfig::validate() const {
  model.validate();
  augmentation.validate();
  if (warmup_iters > decay_iter || decay_iter > iterations) {
    throw ConfigError("need warmup_iters <= decay_iter <= iterations, got " +
                      std::to_string(warmup_iters) + ", " + std::to_string(decay_iter) + ", " +
                      std::to_string(iterations));
  }
  if (!(peak_lr >= 0.0) || !(decayed_lr >= 0.0)) throw ConfigError("learning rates must be >= 0");
  if (clip_length < 2) throw ConfigError("clip_length must be at least 2");
  if (history == 0) throw ConfigError("history must be at least 1");
  if (objects == 0) throw ConfigError("objects must be at least 1");
}

bool TrainConfig::set(const std::string& key, const std::string& value) {
  if (model.set(key, value) || augmentation.set(key, value)) return true;
  if (key == "iterations") iterations = parse_count(key, value);
  else if (key == "warmup_iters") warmup_iters = parse_count(key, value);
  else if (key == "peak_lr") peak_lr = parse_real(key, value);
  else if (key == "decay_iter") decay_iter = parse_count(key, value);
  else if (key == "decayed_lr") decayed_lr = parse_real(key, value);
  else if (key == "clip_length") clip_length = parse_count(key, value);
  else if (key == "history") history = parse_count(key, value);
  else if (key == "seed") seed = parse_u64(key, value);
  else if (key == "regime") regime = parse_regime(value);
  else if (key == "objects") objects = parse_count(key, value);
  else if (key == "checkpoint_every") checkpoint_every = parse_count(key, value);
  else if (key == "detach_masks") detach_masks = parse_switch(key, value);
  else return false;
  return true;
}

KeyValues TrainConfig::to_key_values() const {
  KeyValues out{
      {"iterations", std::to_string(iterations)},
      {"warmup_iters", std::to_string(warmup_iters)},
      {"peak_lr", format_real(peak_lr)},
      {"decay_iter", std::to_string(decay_iter)},
      {"decayed_lr", format_real(decayed_lr)},
      {"clip_length", std::to_string(clip_length)},
      {"history", std::to_string(history)},
      {"seed", std::to_string(seed)},
      {"regime", to_string(regime)},
      {"objects", std::to_string(objects)},
      {"checkpoint_every", std::to_string(checkpoint_every)},
      {"detach_masks", detach_masks ? "on" : "off"},
  };
  for (auto& kv : model.to_key_values()) out.push_back(std::move(kv));
  for (auto& kv : augmentation.to_key_values()) out.push_back(std::move(kv));
  return out;
}

std::string TrainConfig::to_text() const { return format_key_values(to_key_values()); }

TrainConfig TrainConfig::from_text(const std::string& text) {
  TrainConfig config;
  for (const auto& [key, value] : parse_key_values(text)) {
    if (!config.set(key, value)) throw ConfigError("unknown config key '" + key + "'");
  }
  config.validate();
  return config;
}

void TrainConfig::set_iterations(std::size_t n) {
  iterations = n;
  decay_iter = std::min(decay_iter, n);
  warmup_iters = std::min(warmup_iters, n);
}

double lr_at(std::size_t iter, const TrainConfig& config) {
  if (iter < config.warmup_iters) {
    return config.peak_lr * static_cast<double>(iter) / static_cast<double>(config.warmup_iters);
  }
  return iter < config.decay_iter ? config.peak_lr : config.decayed_lr;
}

DataSource synthetic_source(const TrainConfig& config) {
  return [config](std::uint64_t iteration) {
    const SyntheticScene scene =
        generate_scene(derive_seed(config.seed, "train-scene", iteration), config.model.height,
                       config.model.width, config.objects);
    Rng rng(derive_seed(config.seed, "train-augment", iteration));
    return make_fake_sequence(scene, config.clip_length, config.augmentation, rng);
  };
}

DataSource clip_source(std::vector<Clip> clips, const TrainConfig& config) {
  if (clips.empty()) throw ConfigError("training data directory holds no sequences");
  return [clips = std::move(clips), config](std::uint64_t iteration) {
    Rng rng(derive_seed(config.seed, "clip-pick", iteration));
    // Candidate (clip, frame) pairs with labels, and for the cyclic regime
    // room for a full window after them.
    std::vector<std::pair<std::size_t, std::size_t>> starts;
    for (std::size_t c = 0; c < clips.size(); ++c)
      for (std::size_t t = 0; t < clips[c].frames.size(); ++t) {
        const bool labelled = t < clips[c].masks.size() && clips[c].masks[t].defined();
        const bool room = config.regime == Regime::fake_sequence ||
                          t + config.clip_length <= clips[c].frames.size();
        if (labelled && room) starts.emplace_back(c, t);
      }
    if (starts.empty()) throw ConfigError("no labelled frame can start a training clip");
    const auto [c, t] = starts[rng.next_u64() % starts.size()];
    const Clip& src = clips[c];
    if (config.regime == Regime::fake_sequence) {
      SyntheticScene scene{src.frames[t], src.masks[t], iteration, {}};
      Clip clip = make_fake_sequence(scene, config.clip_length, config.augmentation, rng);
      clip.name = src.name;
      return clip;
    }
    Clip clip;
    clip.name = src.name;
    for (std::size_t k = 0; k < config.clip_length; ++k) {
      clip.frames.push_back(src.frames[t + k]);
      clip.masks.push_back(k == 0 ? src.masks[t] : Tensor());
    }
    return clip;
  };
}

std::vector<Clip> synthetic_eval_clips(const TrainConfig& config, std::size_t count,
                                       std::uint64_t seed, std::size_t length) {
  std::vector<Clip> clips;
  for (std::size_t i = 0; i < count; ++i) {
    const SyntheticScene scene = generate_scene(derive_seed(seed, "eval-scene", i),
                                                config.model.height, config.model.width,
                                                config.objects);
    Rng rng(derive_seed(seed, "eval-augment", i));
    clips.push_back(make_fake_sequence(scene, length ? length : config.clip_length,
                                       config.augmentation, rng));
  }
  return clips;
}

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "iter,lr,loss,ce,dice,grad_norm\n";
  for (const auto& r : rows) {
    out += std::to_string(r.iter) + "," + format_real(r.lr) + "," + format_real(r.loss) + "," +
           format_real(r.cross_entropy) + "," + format_real(r.dice) + "," +
           format_real(r.grad_norm) + "\n";
  }
  return out;
}

ClipLoss clip_loss(const SegmentationModel& model, const Clip& clip, const TrainConfig& config) {
  const ModelConfig& mc = model.config();
  PropagationOptions options{config.history, config.detach_masks};
  ClipLoss out;
  if (config.regime == Regime::cyclic) {
    const CyclicResult cyc = cyclic_pass(model, clip.frames, clip.masks.front(), options);
    const LossTerms terms =
        total_loss(cyc.first_frame, target_channels(clip.masks.front(), mc.bg_grid, mc.catch_all));
    return {terms.total, terms.cross_entropy, terms.dice};
  }
  const ClipResult result = propagate_clip(model, clip.frames, clip.masks.front(), options);
  std::vector<Tensor> totals;
  for (std::size_t t = 1; t < clip.frames.size(); ++t) {
    const LossTerms terms =
        total_loss(result.masks[t], target_channels(clip.masks[t], mc.bg_grid, mc.catch_all));
    totals.push_back(terms.total);
    out.cross_entropy += terms.cross_entropy;
    out.dice += terms.dice;
  }
  const double frames = static_cast<double>(totals.size());
  out.total = totals.size() == 1 ? totals.front() : average(totals);
  out.cross_entropy /= frames;
  out.dice /= frames;
  return out;
}

TrainResult train(const TrainConfig& config, const DataSource& data, const TrainOutputs& outputs) {
  config.validate();
  TrainResult result{SegmentationModel(config.model, config.seed), {}};
  SegmentationModel& model = result.model;
  Adam adam(model.params());
  if (!outputs.dir.empty()) {
    fs::create_directories(outputs.dir);
    write_text_file((fs::path(outputs.dir) / "config.txt").string(), config.to_text());
  }

  for (std::size_t iter = 0; iter < config.iterations; ++iter) {
    Graph::active().reset();
    const double lr = lr_at(iter, config);
    const Clip clip = data(iter);
    auto fail = [&](const std::string& what) {
      std::ostringstream msg;
      msg << what << " at iteration " << iter << " (clip '" << clip.name << "', seed "
          << config.seed << ", lr " << format_real(lr) << ")";
      if (!outputs.dir.empty()) {
        write_text_file((fs::path(outputs.dir) / "numeric_failure.txt").string(),
                        msg.str() + "\n" + metrics_csv(result.rows));
      }
      Graph::active().reset();
      throw NumericError(msg.str());
    };
    ClipLoss loss;
    try {
      loss = clip_loss(model, clip, config);
    } catch (const NumericError& e) {
      fail(std::string("non-finite forward pass: ") + e.what());
    }
    model.params().zero_grad();
    const double value = loss.total.item();
    double grad_norm = NAN;
    if (std::isfinite(value)) {
      backward(loss.total);
      grad_norm = model.params().grad_norm();
    }
    if (!std::isfinite(value)) fail("non-finite loss");
    if (!std::isfinite(grad_norm)) fail("non-finite gradient");
    adam.step(model.params(), lr);
    result.rows.push_back({iter, lr, value, loss.cross_entropy, loss.dice, grad_norm});

    if (outputs.progress && (iter + 1) % outputs.progress_every == 0) {
      *outputs.progress << "iter " << iter + 1 << " loss " << value << " lr " << lr << std::endl;
    }
    if (!outputs.dir.empty() && config.checkpoint_every &&
        (iter + 1) % config.checkpoint_every == 0 && iter + 1 < config.iterations) {
      save_checkpoint(model, (fs::path(outputs.dir) / ("checkpoint_" + std::to_string(iter + 1) +
                                                       ".bin")).string());
    }
  }
  if (!outputs.dir.empty()) {
    save_checkpoint(model, (fs::path(outputs.dir) / "checkpoint.bin").string());
    write_text_file((fs::path(outputs.dir) / "metrics.csv").string(), metrics_csv(result.rows));
  }
  return result;
}

}  // namespace maskattn
