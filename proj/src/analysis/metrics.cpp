#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <thread>

#include "maskattn/analysis.hpp"
#include "maskattn/error.hpp"
#include "maskattn/losses.hpp"
#include "maskattn/ops.hpp"
#include "maskattn/propagation.hpp"

namespace maskattn {

namespace {

void check_pair(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != 2 || a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": masks " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
}

std::vector<unsigned char> foreground(const Tensor& m) {
  std::vector<unsigned char> out(m.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m[i] > 0.5;
  return out;
}

std::vector<unsigned char> boundary(const std::vector<unsigned char>& fg, std::size_t h,
                                    std::size_t w) {
  std::vector<unsigned char> out(fg.size(), 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!fg[y * w + x]) continue;
      const bool edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w || !fg[(y - 1) * w + x] ||
                        !fg[(y + 1) * w + x] || !fg[y * w + x - 1] || !fg[y * w + x + 1];
      out[y * w + x] = edge;
    }
  return out;
}

// Chebyshev dilation by `r` via separable running maxima.
std::vector<unsigned char> dilate(const std::vector<unsigned char>& m, std::size_t h, std::size_t w,
                                  std::size_t r) {
  std::vector<unsigned char> rows(m.size(), 0), out(m.size(), 0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!m[y * w + x]) continue;
      const std::size_t lo = x >= r ? x - r : 0, hi = std::min(w - 1, x + r);
      for (std::size_t k = lo; k <= hi; ++k) rows[y * w + k] = 1;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!rows[y * w + x]) continue;
      const std::size_t lo = y >= r ? y - r : 0, hi = std::min(h - 1, y + r);
      for (std::size_t k = lo; k <= hi; ++k) out[k * w + x] = 1;
    }
  return out;
}

}  // namespace

double jaccard(const Tensor& pred, const Tensor& gt) {
  check_pair(pred, gt, "jaccard");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const bool a = pred[i] > 0.5, b = gt[i] > 0.5;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::size_t default_boundary_tolerance(std::size_t height, std::size_t width) {
  const double diag = std::hypot(static_cast<double>(height), static_cast<double>(width));
  return static_cast<std::size_t>(std::ceil(0.008 * diag));
}

double boundary_f(const Tensor& pred, const Tensor& gt, std::size_t tol) {
  check_pair(pred, gt, "boundary_f");
  const std::size_t h = pred.dim(0), w = pred.dim(1);
  const auto pb = boundary(foreground(pred), h, w);
  const auto gb = boundary(foreground(gt), h, w);
  const auto pd = dilate(pb, h, w, tol), gd = dilate(gb, h, w, tol);
  std::size_t np = 0, ng = 0, hit_p = 0, hit_g = 0;
  for (std::size_t i = 0; i < pb.size(); ++i) {
    np += pb[i];
    ng += gb[i];
    hit_p += pb[i] && gd[i];
    hit_g += gb[i] && pd[i];
  }
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  const double precision = static_cast<double>(hit_p) / static_cast<double>(np);
  const double recall = static_cast<double>(hit_g) / static_cast<double>(ng);
  return precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
}

namespace {

void finish(MetricsReport& r) {
  double sj = 0.0, sf = 0.0;
  for (const auto& o : r.objects) {
    sj += o.j;
    sf += o.f;
  }
  const double n = static_cast<double>(r.objects.size());
  r.mean_j = r.objects.empty() ? 0.0 : sj / n;
  r.mean_f = r.objects.empty() ? 0.0 : sf / n;
  r.j_and_f = 0.5 * (r.mean_j + r.mean_f);
}

}  // namespace

MetricsReport j_and_f(const std::string& clip, const std::vector<Tensor>& predictions,
                      const std::vector<Tensor>& gt) {
  if (predictions.size() != gt.size()) {
    throw DimensionError("j_and_f: " + std::to_string(predictions.size()) + " predicted frames, " +
                         std::to_string(gt.size()) + " ground-truth frames");
  }
  MetricsReport report;
  if (gt.empty() || !gt.front().defined()) return report;
  const std::size_t n = gt.front().dim(0), h = gt.front().dim(1), w = gt.front().dim(2);
  const std::size_t tol = default_boundary_tolerance(h, w);
  std::vector<ObjectScore> objects(n);
  for (std::size_t i = 0; i < n; ++i) objects[i] = {clip, i, 0.0, 0.0, 0};
  for (std::size_t t = 1; t < gt.size(); ++t) {
    if (!gt[t].defined()) continue;
    if (predictions[t].shape() != gt[t].shape()) {
      throw DimensionError("j_and_f: frame " + std::to_string(t) + " prediction " +
                           shape_to_string(predictions[t].shape()) + ", ground truth " +
                           shape_to_string(gt[t].shape()));
    }
    for (std::size_t i = 0; i < n; ++i) {
      const Tensor p = reshape(slice0(predictions[t], i, i + 1), {h, w});
      const Tensor g = reshape(slice0(gt[t], i, i + 1), {h, w});
      objects[i].j += jaccard(p, g);
      objects[i].f += boundary_f(p, g, tol);
      ++objects[i].frames;
    }
  }
  for (auto& o : objects) {
    if (o.frames == 0) continue;
    o.j /= static_cast<double>(o.frames);
    o.f /= static_cast<double>(o.frames);
    report.objects.push_back(o);
  }
  finish(report);
  return report;
}

MetricsReport merge_reports(const std::vector<MetricsReport>& reports) {
  MetricsReport out;
  for (const auto& r : reports) out.objects.insert(out.objects.end(), r.objects.begin(), r.objects.end());
  finish(out);
  return out;
}

namespace {

MetricsReport evaluate_one(const SegmentationModel& model, const Clip& clip, std::size_t history) {
  NoGradGuard guard;
  const ClipResult result =
      propagate_clip(model, clip.frames, clip.masks.front(), PropagationOptions{history, false});
  std::vector<Tensor> predictions;
  for (const auto& m : result.masks) predictions.push_back(m.object_masks());
  return j_and_f(clip.name, predictions, clip.masks);
}

}  // namespace

MetricsReport evaluate_clips(const SegmentationModel& model, const std::vector<Clip>& clips,
                             std::size_t history, std::size_t threads) {
  std::vector<MetricsReport> reports(clips.size());
  threads = std::max<std::size_t>(1, std::min(threads, clips.size()));
  if (threads == 1) {
    for (std::size_t i = 0; i < clips.size(); ++i) reports[i] = evaluate_one(model, clips[i], history);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t k = 0; k < threads; ++k) {
      pool.emplace_back([&, k] {
        try {
          for (std::size_t i = k; i < clips.size(); i += threads) {
            reports[i] = evaluate_one(model, clips[i], history);
          }
        } catch (...) {
          errors[k] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  return merge_reports(reports);
}

std::size_t eval_threads_from_env() {
  const char* v = std::getenv("MASKATTN_THREADS");
  if (!v || !*v) return 1;
  const std::size_t n = parse_count("MASKATTN_THREADS", v);
  return n == 0 ? 1 : n;
}

}  // namespace maskattn
