#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "maskattn/data.hpp"
#include "maskattn/model.hpp"
#include "maskattn/tensor.hpp"

namespace maskattn {

// Masks are [H x W]; values above 0.5 count as foreground.

// |A and B| / |A or B|, with J(empty, empty) = 1.
double jaccard(const Tensor& pred, const Tensor& gt);

// ceil(0.008 * image diagonal).
std::size_t default_boundary_tolerance(std::size_t height, std::size_t width);

// Boundary F1. A boundary pixel is a foreground pixel with a 4-neighbour in
// the background or outside the frame. Pixels match within Chebyshev distance
// `tol`. F(empty, empty) = 1; 0 when exactly one boundary is empty.
double boundary_f(const Tensor& pred, const Tensor& gt, std::size_t tol);

struct ObjectScore {
  std::string clip;
  std::size_t object = 0;
  double j = 0.0;  // mean over scored frames
  double f = 0.0;
  std::size_t frames = 0;
};

struct MetricsReport {
  std::vector<ObjectScore> objects;
  double mean_j = 0.0;
  double mean_f = 0.0;
  double j_and_f = 0.0;
};

// predictions/gt: per frame [N x H x W]. Frame 0 is given and not scored;
// frames whose ground truth is undefined are skipped.
MetricsReport j_and_f(const std::string& clip, const std::vector<Tensor>& predictions,
                      const std::vector<Tensor>& gt);
// Pools the object scores of several reports, each object weighted equally.
MetricsReport merge_reports(const std::vector<MetricsReport>& reports);

// Propagates every clip without gradients and scores it. `threads` > 1
// evaluates clips concurrently.
MetricsReport evaluate_clips(const SegmentationModel& model, const std::vector<Clip>& clips,
                             std::size_t history, std::size_t threads = 1);

// Thread count from MASKATTN_THREADS, default 1.
std::size_t eval_threads_from_env();

// Pairwise Euclidean distances of the rows, [N x N].
Tensor descriptor_distances(const Tensor& descriptors);

struct PRCurve {
  std::vector<double> recall;     // 0, 0.05, ..., 1
  std::vector<double> precision;  // interpolated, averaged over queries
  std::size_t queries = 0;
  std::size_t singletons_excluded = 0;
};

// Per query: rank the other descriptors by distance (ties by index), take the
// interpolated precision at each recall level of same-instance retrieval and
// average over queries. Queries without another same-instance descriptor are
// excluded.
PRCurve pr_curve(const Tensor& distances, const std::vector<int>& labels);

struct PcaResult {
  Tensor projected;   // [N x d]
  Tensor components;  // [d x C], orthonormal rows
  std::vector<double> explained_variance;
  std::vector<double> mean;
};

// Deflated power iteration on the sample covariance (divisor N - 1, or 1 when
// N = 1). Each component's largest-magnitude entry is made positive.
PcaResult pca_project(const Tensor& descriptors, std::size_t dims = 2, double tol = 1e-10,
                      std::size_t max_iters = 10000);

// P5 heatmap; byte = floor(255 p + 0.5). prob [H x W] in [0, 1].
void export_heatmap(const Tensor& prob, const std::string& path);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

std::string to_csv(const CsvTable& table);
CsvTable parse_csv(const std::string& text);
void export_csv(const CsvTable& table, const std::string& path);
// Header label,d0,...,d{C-1}; one row per descriptor.
void export_descriptors(const Tensor& descriptors, const std::vector<int>& labels,
                        const std::string& path);

}  // namespace maskattn
