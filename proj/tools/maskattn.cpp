#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>

#include "maskattn/analysis.hpp"
#include "maskattn/data.hpp"
#include "maskattn/error.hpp"
#include "maskattn/losses.hpp"
#include "maskattn/ops.hpp"
#include "maskattn/propagation.hpp"
#include "maskattn/train.hpp"

namespace fs = std::filesystem;
using namespace maskattn;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

std::vector<std::size_t> parse_sizes(const std::string& name, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_count(name, item));
  if (out.empty()) throw ConfigError(name + ": empty list");
  return out;
}

std::string frame_stem(std::size_t t) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%05zu", t);
  return buf;
}

// Held-out clips from a DAVIS-style directory or generated from a seed.
struct ClipInput {
  std::string data;
  std::size_t synthetic = 0;
  std::uint64_t seed = 12345;
  std::size_t length = 3;
  std::size_t objects = 2;

  void add(CLI::App* cmd) {
    cmd->add_option("--data", data, "DAVIS-style directory (frames/, masks/)");
    cmd->add_option("--synthetic", synthetic, "Number of generated clips when --data is absent");
    cmd->add_option("--data-seed", seed, "Seed of the generated clips");
    cmd->add_option("--length", length, "Frames per generated clip");
    cmd->add_option("--objects", objects, "Objects per generated clip");
  }

  std::vector<Clip> load(const ModelConfig& model) const {
    if (!data.empty()) {
      if (!fs::is_directory(data)) throw ConfigError("data directory '" + data + "' does not exist");
      return ingest_davis_dir(data);
    }
    if (synthetic == 0) throw ConfigError("give --data DIR or --synthetic N");
    TrainConfig c;
    c.model = model;
    c.objects = objects;
    return synthetic_eval_clips(c, synthetic, seed, length);
  }
};

void check_resolution(const ModelConfig& model, const std::vector<Clip>& clips) {
  for (const auto& clip : clips) {
    const Tensor& f = clip.frames.front();
    if (f.dim(1) != model.height || f.dim(2) != model.width) {
      throw ConfigError("clip '" + clip.name + "' is " + std::to_string(f.dim(1)) + "x" +
                        std::to_string(f.dim(2)) + " but the checkpoint was trained at " +
                        std::to_string(model.height) + "x" + std::to_string(model.width));
    }
  }
}

// --- train ---------------------------------------------------------------------

struct TrainArgs {
  std::string config_path, out, data, regime, attention, catch_all;
  std::uint64_t seed = 0;
  bool seed_set = false;
  long long iterations = -1;
  std::vector<std::string> overrides;
  std::size_t progress = 0;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig config;
  if (!a.config_path.empty()) {
    if (!fs::exists(a.config_path)) throw ConfigError("config file '" + a.config_path + "' not found");
    for (const auto& [k, v] : parse_key_values(read_text_file(a.config_path))) {
      if (!config.set(k, v)) throw ConfigError("unknown config key '" + k + "'");
    }
  }
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    if (!config.set(kv.substr(0, eq), kv.substr(eq + 1))) {
      throw ConfigError("unknown config key '" + kv.substr(0, eq) + "'");
    }
  }
  if (a.seed_set) config.seed = a.seed;
  if (!a.regime.empty()) config.regime = parse_regime(a.regime);
  if (!a.attention.empty()) config.model.set("attention_mode", a.attention);
  if (!a.catch_all.empty()) config.model.set("catch_all", a.catch_all);
  if (a.iterations >= 0) config.set_iterations(static_cast<std::size_t>(a.iterations));
  config.validate();

  DataSource source;
  if (!a.data.empty()) {
    if (!fs::is_directory(a.data)) throw ConfigError("data directory '" + a.data + "' does not exist");
    std::vector<Clip> clips = ingest_davis_dir(a.data);
    check_resolution(config.model, clips);
    source = clip_source(std::move(clips), config);
  } else {
    source = synthetic_source(config);
  }
  TrainOutputs outputs;
  outputs.dir = a.out;
  if (a.progress) {
    outputs.progress = &std::cerr;
    outputs.progress_every = a.progress;
  }
  const TrainResult result = train(config, source, outputs);
  if (!result.rows.empty()) {
    std::cout << "trained " << result.rows.size() << " iterations, final loss "
              << format_real(result.rows.back().loss) << "\n";
  } else {
    std::cout << "trained 0 iterations\n";
  }
  return 0;
}

// --- eval ------------------------------------------------------------------------

int cmd_eval(const std::string& ckpt, const ClipInput& input, const std::string& histories,
             const std::string& out) {
  const SegmentationModel model = load_checkpoint(ckpt);
  const std::vector<Clip> clips = input.load(model.config());
  if (clips.empty()) throw ConfigError("no clips to evaluate");
  check_resolution(model.config(), clips);
  const std::size_t threads = eval_threads_from_env();
  CsvTable table{{"history", "objects", "mean_j", "mean_f", "j_and_f"}, {}};
  for (std::size_t w : parse_sizes("--history", histories)) {
    const MetricsReport r = evaluate_clips(model, clips, w, threads);
    std::cout << "history " << w << " J " << format_real(r.mean_j) << " F " << format_real(r.mean_f)
              << " J&F " << format_real(r.j_and_f) << "\n";
    table.rows.push_back({std::to_string(w), std::to_string(r.objects.size()), format_real(r.mean_j),
                          format_real(r.mean_f), format_real(r.j_and_f)});
  }
  if (!out.empty()) export_csv(table, out);
  return 0;
}

// --- propagate -------------------------------------------------------------------

int cmd_propagate(const std::string& ckpt, const std::string& clip_dir, const std::string& sequence,
                  std::size_t history, const std::string& out) {
  const SegmentationModel model = load_checkpoint(ckpt);
  if (!fs::is_directory(clip_dir)) throw ConfigError("clip directory '" + clip_dir + "' does not exist");
  std::vector<Clip> clips = ingest_davis_dir(clip_dir);
  if (!sequence.empty()) {
    std::erase_if(clips, [&](const Clip& c) { return c.name != sequence; });
    if (clips.empty()) throw ConfigError("sequence '" + sequence + "' not found in " + clip_dir);
  }
  if (clips.empty()) throw ConfigError("no sequences in " + clip_dir);
  check_resolution(model.config(), clips);
  NoGradGuard guard;
  for (const auto& clip : clips) {
    const ClipResult r = propagate_clip(model, clip.frames, clip.masks.front(), {history, false});
    const fs::path dir = fs::path(out) / clip.name;
    fs::create_directories(dir);
    for (std::size_t t = 0; t < r.masks.size(); ++t) {
      const Tensor obj = r.masks[t].object_masks();
      const std::size_t h = obj.dim(1), w = obj.dim(2);
      for (std::size_t i = 0; i < obj.dim(0); ++i) {
        std::vector<double> plane(obj.data().begin() + i * h * w, obj.data().begin() + (i + 1) * h * w);
        for (double& v : plane) v = std::clamp(v, 0.0, 1.0);
        export_heatmap(Tensor({h, w}, plane),
                       (dir / (frame_stem(t) + "_obj" + std::to_string(i) + ".pgm")).string());
      }
    }
    std::cout << clip.name << ": " << r.masks.size() << " frames\n";
  }
  return 0;
}

// --- retrieve / project ---------------------------------------------------------

struct DescriptorInput {
  std::string ckpt, descriptors;
  ClipInput clips;

  void add(CLI::App* cmd) {
    cmd->add_option("--ckpt", ckpt, "Checkpoint used to encode the clips");
    cmd->add_option("--descriptors", descriptors, "CSV of label,d0,... rows instead of a checkpoint");
    clips.add(cmd);
  }

  // One descriptor per object per labelled frame; the label identifies the
  // instance (clip, object).
  std::pair<Tensor, std::vector<int>> load() const {
    if (!descriptors.empty()) {
      const CsvTable t = parse_csv(read_text_file(descriptors));
      if (t.header.size() < 2 || t.header[0] != "label") {
        throw ConfigError("'" + descriptors + "' must start with a label column");
      }
      std::vector<double> values;
      std::vector<int> labels;
      for (const auto& row : t.rows) {
        labels.push_back(static_cast<int>(parse_count("label", row[0])));
        for (std::size_t k = 1; k < row.size(); ++k) values.push_back(parse_real(t.header[k], row[k]));
      }
      return {Tensor({labels.size(), t.header.size() - 1}, std::move(values)), labels};
    }
    if (ckpt.empty()) throw ConfigError("give --ckpt or --descriptors");
    const SegmentationModel model = load_checkpoint(ckpt);
    const std::vector<Clip> data = clips.load(model.config());
    check_resolution(model.config(), data);
    NoGradGuard guard;
    std::vector<double> values;
    std::vector<int> labels;
    int next_label = 0;
    for (const auto& clip : data) {
      const std::size_t n = clip.masks.front().dim(0);
      for (std::size_t t = 0; t < clip.frames.size(); ++t) {
        if (!clip.masks[t].defined()) continue;
        const DescriptorSet d =
            model.encode_objects(model.backbone(clip.frames[t]), binarize(clip.masks[t]), t);
        const auto fg = d.foreground.data();
        values.insert(values.end(), fg.begin(), fg.end());
        for (std::size_t i = 0; i < n; ++i) labels.push_back(next_label + static_cast<int>(i));
      }
      next_label += static_cast<int>(n);
    }
    const std::size_t c = model.config().model_dim;
    return {Tensor({labels.size(), c}, std::move(values)), labels};
  }
};

int cmd_retrieve(const DescriptorInput& input, const std::string& out) {
  const auto [desc, labels] = input.load();
  const PRCurve curve = pr_curve(descriptor_distances(desc), labels);
  fs::create_directories(out);
  CsvTable table{{"recall", "precision"}, {}};
  for (std::size_t i = 0; i < curve.recall.size(); ++i) {
    table.rows.push_back({format_real(curve.recall[i]), format_real(curve.precision[i])});
  }
  export_csv(table, (fs::path(out) / "pr_curve.csv").string());
  export_descriptors(desc, labels, (fs::path(out) / "descriptors.csv").string());
  std::cout << "queries " << curve.queries << " singletons " << curve.singletons_excluded
            << " precision@recall1 " << format_real(curve.precision.back()) << "\n";
  return 0;
}

int cmd_project(const DescriptorInput& input, std::size_t dims, const std::string& out) {
  const auto [desc, labels] = input.load();
  const PcaResult pca = pca_project(desc, dims);
  fs::create_directories(out);
  CsvTable table{{"label"}, {}};
  for (std::size_t d = 0; d < dims; ++d) table.header.push_back("pc" + std::to_string(d + 1));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::vector<std::string> row{std::to_string(labels[i])};
    for (std::size_t d = 0; d < dims; ++d) row.push_back(format_real(pca.projected[i * dims + d]));
    table.rows.push_back(std::move(row));
  }
  export_csv(table, (fs::path(out) / "projection.csv").string());
  CsvTable var{{"component", "explained_variance"}, {}};
  for (std::size_t d = 0; d < dims; ++d) {
    var.rows.push_back({std::to_string(d + 1), format_real(pca.explained_variance[d])});
  }
  export_csv(var, (fs::path(out) / "explained_variance.csv").string());
  std::cout << "projected " << labels.size() << " descriptors to " << dims << "-D\n";
  return 0;
}

// --- inspect-attn ----------------------------------------------------------------

int cmd_inspect_attn(const std::string& ckpt, const std::string& frame, const std::string& masks,
                     std::uint64_t seed, std::size_t objects, std::size_t layer, std::size_t head,
                     const std::string& out) {
  const SegmentationModel model = load_checkpoint(ckpt);
  const ModelConfig& c = model.config();
  if (head >= c.num_heads) {
    throw UsageError("head " + std::to_string(head) + " out of range (" +
                     std::to_string(c.num_heads) + " heads)");
  }
  if (layer >= c.encoder_layers) {
    throw UsageError("layer " + std::to_string(layer) + " out of range (" +
                     std::to_string(c.encoder_layers) + " layers)");
  }
  Tensor image, obj;
  if (!frame.empty()) {
    if (masks.empty()) throw ConfigError("--frame needs --masks (PGM of object ids)");
    image = read_ppm(frame);
    std::size_t h = 0, w = 0;
    const auto ids = read_pgm(masks, h, w);
    if (h != image.dim(1) || w != image.dim(2)) throw ConfigError("mask and frame sizes differ");
    const std::size_t n = *std::max_element(ids.begin(), ids.end());
    if (n == 0) throw ConfigError("mask '" + masks + "' holds no object");
    std::vector<double> m(n * h * w, 0.0);
    for (std::size_t p = 0; p < ids.size(); ++p)
      if (ids[p]) m[(ids[p] - 1) * h * w + p] = 1.0;
    obj = Tensor({n, h, w}, std::move(m));
  } else {
    const SyntheticScene s = generate_scene(seed, c.height, c.width, objects);
    image = s.image;
    obj = s.object_masks;
  }
  if (image.dim(1) != c.height || image.dim(2) != c.width) {
    throw ConfigError("frame size does not match the checkpoint");
  }
  const FeaturePyramid f = model.backbone(image);
  const std::size_t n = obj.dim(0);
  const Tensor all = concat0({obj, split_background_grid(obj, c.bg_grid)});
  const Tensor logits = model.encoder_attention_logits(f, all, layer, head);
  const std::size_t h8 = f.f8.dim(1), w8 = f.f8.dim(2), tokens = h8 * w8;
  fs::create_directories(out);
  CsvTable table{{"query"}, {}};
  for (std::size_t k = 0; k < tokens; ++k) table.header.push_back("t" + std::to_string(k));
  for (std::size_t q = 0; q < logits.dim(0); ++q) {
    const std::string name = q < n ? "obj" + std::to_string(q) : "bg" + std::to_string(q - n);
    std::vector<double> row(logits.data().begin() + q * tokens, logits.data().begin() + (q + 1) * tokens);
    std::vector<std::string> cells{name};
    for (double v : row) cells.push_back(format_real(v));
    table.rows.push_back(std::move(cells));
    // Min-max scaled per query for display.
    const auto [lo, hi] = std::minmax_element(row.begin(), row.end());
    const double span = *hi - *lo, base = *lo;
    for (double& v : row) v = span > 0.0 ? (v - base) / span : 0.0;
    export_heatmap(Tensor({h8, w8}, row), (fs::path(out) / (name + ".pgm")).string());
  }
  export_csv(table, (fs::path(out) / "logits.csv").string());
  std::cout << "layer " << layer << " head " << head << ": " << logits.dim(0) << " queries x "
            << tokens << " tokens\n";
  return 0;
}

// --- probe-throughput -----------------------------------------------------------

int cmd_probe(const std::string& ckpt, std::uint64_t seed, const std::string& histories,
              std::size_t frames, std::size_t runs, std::size_t objects, const std::string& out) {
  const SegmentationModel model = ckpt.empty() ? SegmentationModel(ModelConfig{}, seed) : load_checkpoint(ckpt);
  TrainConfig c;
  c.model = model.config();
  c.objects = objects;
  const Clip clip = synthetic_eval_clips(c, 1, seed, frames).front();
  const auto rows =
      throughput_probe(model, clip.frames, clip.masks.front(), parse_sizes("--histories", histories), runs);
  CsvTable table{{"history", "frames_per_second", "history_bytes_per_frame", "max_history_entries"}, {}};
  for (const auto& r : rows) {
    std::cout << "history " << r.history << " fps " << format_real(r.frames_per_second)
              << " bytes/frame " << r.history_bytes_per_frame << "\n";
    table.rows.push_back({std::to_string(r.history), format_real(r.frames_per_second),
                          std::to_string(r.history_bytes_per_frame),
                          std::to_string(r.max_history_entries)});
  }
  if (!out.empty()) export_csv(table, out);
  return 0;
}

// --- gen-data ----------------------------------------------------------------------

int cmd_gen_data(std::uint64_t seed, std::size_t n, std::size_t length, std::size_t objects,
                 std::size_t size, const std::string& out) {
  TrainConfig c;
  c.model.height = c.model.width = size;
  c.model.validate();
  c.objects = objects;
  std::vector<Clip> clips = synthetic_eval_clips(c, n, seed, length);
  for (std::size_t i = 0; i < clips.size(); ++i) {
    clips[i].name = "seq" + frame_stem(i);
    for (auto& m : clips[i].masks) m = binarize(m);
  }
  write_davis_dir(out, clips);
  std::cout << "wrote " << n << " sequences to " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Soft-masked attention object descriptors: training, propagation and analysis"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  int code = 0;

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model");
  train_cmd->add_option("--config", ta.config_path, "key = value config file");
  train_cmd->add_option("--out", ta.out, "Output directory")->required();
  auto* seed_opt = train_cmd->add_option("--seed", ta.seed, "Run seed");
  train_cmd->add_option("--regime", ta.regime, "fake|cyclic (default from config: fake)");
  train_cmd->add_option("--attention", ta.attention, "soft|hard|none (default from config: soft)");
  train_cmd->add_option("--catch-all", ta.catch_all, "on|off (default from config: on)");
  train_cmd->add_option("--iterations", ta.iterations, "Override iterations (-1 keeps the config)");
  train_cmd->add_option("--data", ta.data, "DAVIS-style training directory instead of synthetic scenes");
  train_cmd->add_option("--set", ta.overrides, "Extra key=value config overrides");
  train_cmd->add_option("--progress", ta.progress, "Log every N iterations to stderr (0 = quiet)");

  std::string ckpt, out, histories = "7", sequence, clip_dir;
  ClipInput eval_input;
  auto* eval_cmd = app.add_subcommand("eval", "J&F of a checkpoint on held-out clips");
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval_input.add(eval_cmd);
  eval_cmd->add_option("--history", histories, "History length or comma list to sweep");
  eval_cmd->add_option("--out", out, "CSV with one row per history length");

  std::size_t history = 7;
  auto* prop_cmd = app.add_subcommand("propagate", "Propagate first-frame masks through clips");
  prop_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  prop_cmd->add_option("--clip", clip_dir, "DAVIS-style directory")->required();
  prop_cmd->add_option("--sequence", sequence, "Only this sequence");
  prop_cmd->add_option("--history", history, "History length");
  prop_cmd->add_option("--out", out, "Output directory for per-frame object PGMs")->required();

  DescriptorInput desc_input;
  auto* retr_cmd = app.add_subcommand("retrieve", "Descriptor retrieval precision-recall curve");
  desc_input.add(retr_cmd);
  retr_cmd->add_option("--out", out, "Output directory")->required();

  std::size_t dims = 2;
  auto* proj_cmd = app.add_subcommand("project", "PCA projection of object descriptors");
  desc_input.add(proj_cmd);
  proj_cmd->add_option("--dims", dims, "Projection dimension");
  proj_cmd->add_option("--out", out, "Output directory")->required();

  std::string frame, masks;
  std::uint64_t seed = 0;
  std::size_t layer = 0, head = 0, objects = 2;
  auto* attn_cmd = app.add_subcommand("inspect-attn", "Encoder attention logits after masking");
  attn_cmd->add_option("--ckpt", ckpt, "Checkpoint")->required();
  attn_cmd->add_option("--frame", frame, "PPM frame (default: a generated scene)");
  attn_cmd->add_option("--masks", masks, "PGM of object ids for --frame");
  attn_cmd->add_option("--seed", seed, "Seed of the generated scene");
  attn_cmd->add_option("--objects", objects, "Objects in the generated scene");
  attn_cmd->add_option("--layer", layer, "Encoder layer");
  attn_cmd->add_option("--head", head, "Attention head");
  attn_cmd->add_option("--out", out, "Output directory")->required();

  std::string probe_histories = "1,10";
  std::size_t frames = 12, runs = 5;
  auto* probe_cmd = app.add_subcommand("probe-throughput", "Frames per second against history length");
  probe_cmd->add_option("--ckpt", ckpt, "Checkpoint (default: freshly initialized model)");
  probe_cmd->add_option("--seed", seed, "Seed of the clip and of the fresh model");
  probe_cmd->add_option("--histories", probe_histories, "Comma list of history lengths");
  probe_cmd->add_option("--frames", frames, "Frames in the probe clip");
  probe_cmd->add_option("--runs", runs, "Timed runs per history length (median reported)");
  probe_cmd->add_option("--objects", objects, "Objects in the probe clip");
  probe_cmd->add_option("--out", out, "CSV output");

  std::size_t n = 4, length = 3, size = 64;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write synthetic sequences in DAVIS layout");
  gen_cmd->add_option("--seed", seed, "Seed");
  gen_cmd->add_option("--n", n, "Number of sequences");
  gen_cmd->add_option("--length", length, "Frames per sequence");
  gen_cmd->add_option("--objects", objects, "Objects per scene");
  gen_cmd->add_option("--size", size, "Frame height and width");
  gen_cmd->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  ta.seed_set = seed_opt->count() > 0;

  try {
    if (*train_cmd) code = cmd_train(ta);
    else if (*eval_cmd) code = cmd_eval(ckpt, eval_input, histories, out);
    else if (*prop_cmd) code = cmd_propagate(ckpt, clip_dir, sequence, history, out);
    else if (*retr_cmd) code = cmd_retrieve(desc_input, out);
    else if (*proj_cmd) code = cmd_project(desc_input, dims, out);
    else if (*attn_cmd) code = cmd_inspect_attn(ckpt, frame, masks, seed, objects, layer, head, out);
    else if (*probe_cmd) code = cmd_probe(ckpt, seed, probe_histories, frames, runs, objects, out);
    else if (*gen_cmd) code = cmd_gen_data(seed, n, length, objects, size, out);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const OracleError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return code;
}
