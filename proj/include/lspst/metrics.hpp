#ifndef LSPST_METRICS_HPP
#define LSPST_METRICS_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lspst/tensor.hpp"

namespace lspst {

struct BinaryMask {
  int h = 0, w = 0;
  std::vector<uint8_t> values;  // 0/1

  bool at(int y, int x) const { return values[size_t(y) * w + x] != 0; }
  int64_t count() const;
};

// 8-connected components; labels are contiguous 1..count in first-encounter
// row-major order, centroids are unweighted pixel-coordinate means.
struct ComponentSet {
  int h = 0, w = 0;
  std::vector<int32_t> labels;  // 0 = background
  int count = 0;
  std::vector<std::pair<double, double>> centroids;  // (y, x) per component
  std::vector<int64_t> areas;                        // pixels per component
};

struct EvalCounts {
  // Pooled accumulators; ratios are derived at reporting time.
  int64_t intersection = 0;
  int64_t union_ = 0;
  int64_t detected = 0;
  int64_t total_targets = 0;
  int64_t false_pixels = 0;
  int64_t total_pixels = 0;
};

struct EvalReport {
  double iou = 0;   // pooled over the dataset
  double niou = 0;  // mean of per-scene IoU
  double pd = 0;
  double fa = 0;  // false-alarm pixel rate (fraction; callers may print 1e-6 units)
  std::vector<std::pair<double, double>> roc;  // (fa, pd) per threshold
};

BinaryMask binarize(const Tensor& conf, double thresh);
BinaryMask mask_from_tensor(const Tensor& t);  // values >= 0.5 -> foreground

double pixel_iou(const BinaryMask& pred, const BinaryMask& gt);
double niou(const std::vector<std::pair<BinaryMask, BinaryMask>>& pairs);

ComponentSet connected_components(const BinaryMask& mask);

// A target is detected when an unmatched predicted-component centroid lies
// within dist_thresh (Euclidean); matching is greedy nearest-first, one
// target per component. fa counts pixels of unmatched components.
struct PdFaResult {
  int64_t detected = 0;
  int64_t total = 0;
  int64_t false_pixels = 0;
  int64_t total_pixels = 0;
  double pd() const;
  double fa() const;
};

PdFaResult pd_fa(const BinaryMask& pred,
                 const std::vector<std::pair<double, double>>& gt_centers,
                 double dist_thresh);

// Dataset-wide ROC at strictly descending thresholds in (0,1); targets and
// false-alarm pixels are pooled across scenes.
struct RocInput {
  Tensor conf;
  std::vector<std::pair<double, double>> gt_centers;
};

std::vector<std::pair<double, double>> roc(const std::vector<RocInput>& data,
                                           const std::vector<double>& thresholds,
                                           double dist_thresh);

// GT target centers recovered from a mask (component centroids); the manifest
// only records target counts, so evaluation matches against mask components.
std::vector<std::pair<double, double>> mask_centers(const BinaryMask& gt);

}  // namespace lspst

#endif
