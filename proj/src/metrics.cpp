#include "lspst/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lspst {

int64_t BinaryMask::count() const {
  int64_t n = 0;
  for (uint8_t v : values) n += v ? 1 : 0;
  return n;
}

BinaryMask binarize(const Tensor& conf, double thresh) {
  const Shape s = conf.shape();
  BinaryMask m;
  m.h = s.h;
  m.w = s.w;
  m.values.resize(size_t(s.h) * s.w);
  auto d = conf.data();
  for (size_t i = 0; i < m.values.size(); ++i)
    m.values[i] = double(d[i]) >= thresh ? 1 : 0;
  return m;
}

BinaryMask mask_from_tensor(const Tensor& t) { return binarize(t, 0.5); }

double pixel_iou(const BinaryMask& pred, const BinaryMask& gt) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw std::invalid_argument("pixel_iou: shape mismatch");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < pred.values.size(); ++i) {
    const bool a = pred.values[i], b = gt.values[i];
    inter += (a && b) ? 1 : 0;
    uni += (a || b) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : double(inter) / double(uni);
}

double niou(const std::vector<std::pair<BinaryMask, BinaryMask>>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("niou: empty pair list");
  double acc = 0;
  for (const auto& [p, g] : pairs) acc += pixel_iou(p, g);
  return acc / double(pairs.size());
}

ComponentSet connected_components(const BinaryMask& mask) {
  ComponentSet cs;
  cs.h = mask.h;
  cs.w = mask.w;
  cs.labels.assign(mask.values.size(), 0);
  std::vector<size_t> stack;
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x) {
      const size_t idx = size_t(y) * mask.w + x;
      if (!mask.values[idx] || cs.labels[idx]) continue;
      const int32_t label = ++cs.count;
      double sy = 0, sx = 0;
      int64_t area = 0;
      stack.push_back(idx);
      cs.labels[idx] = label;
      while (!stack.empty()) {
        const size_t cur = stack.back();
        stack.pop_back();
        const int cy = int(cur / mask.w), cx = int(cur % mask.w);
        sy += cy;
        sx += cx;
        ++area;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            if (!dy && !dx) continue;
            const int ny = cy + dy, nx = cx + dx;
            if (ny < 0 || ny >= mask.h || nx < 0 || nx >= mask.w) continue;
            const size_t nidx = size_t(ny) * mask.w + nx;
            if (mask.values[nidx] && !cs.labels[nidx]) {
              cs.labels[nidx] = label;
              stack.push_back(nidx);
            }
          }
      }
      cs.centroids.emplace_back(sy / double(area), sx / double(area));
      cs.areas.push_back(area);
    }
  return cs;
}

double PdFaResult::pd() const {
  return total == 0 ? 1.0 : double(detected) / double(total);
}
double PdFaResult::fa() const {
  return total_pixels == 0 ? 0.0
                           : double(false_pixels) / double(total_pixels);
}

PdFaResult pd_fa(const BinaryMask& pred,
                 const std::vector<std::pair<double, double>>& gt_centers,
                 double dist_thresh) {
  if (dist_thresh <= 0)
    throw std::invalid_argument("pd_fa: dist_thresh must be > 0");
  const ComponentSet cs = connected_components(pred);

  struct Pair {
    double dist;
    int comp;
    int target;
  };
  std::vector<Pair> pairs;
  for (int c = 0; c < cs.count; ++c)
    for (int t = 0; t < int(gt_centers.size()); ++t) {
      const double dy = cs.centroids[c].first - gt_centers[t].first;
      const double dx = cs.centroids[c].second - gt_centers[t].second;
      const double d = std::sqrt(dy * dy + dx * dx);
      if (d <= dist_thresh) pairs.push_back({d, c, t});
    }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    if (a.comp != b.comp) return a.comp < b.comp;
    return a.target < b.target;
  });
  std::vector<char> comp_used(cs.count, 0), target_hit(gt_centers.size(), 0);
  for (const Pair& p : pairs) {
    if (comp_used[p.comp] || target_hit[p.target]) continue;
    comp_used[p.comp] = 1;
    target_hit[p.target] = 1;
  }

  PdFaResult r;
  r.total = int64_t(gt_centers.size());
  for (char h : target_hit) r.detected += h ? 1 : 0;
  for (int c = 0; c < cs.count; ++c)
    if (!comp_used[c]) r.false_pixels += cs.areas[c];
  r.total_pixels = int64_t(pred.h) * pred.w;
  return r;
}

std::vector<std::pair<double, double>> mask_centers(const BinaryMask& gt) {
  const ComponentSet cs = connected_components(gt);
  return cs.centroids;
}

std::vector<std::pair<double, double>> roc(
    const std::vector<RocInput>& data, const std::vector<double>& thresholds,
    double dist_thresh) {
  for (size_t i = 0; i < thresholds.size(); ++i) {
    if (thresholds[i] <= 0 || thresholds[i] >= 1)
      throw std::invalid_argument("roc: thresholds must lie in (0,1)");
    if (i > 0 && thresholds[i] >= thresholds[i - 1])
      throw std::invalid_argument("roc: thresholds must be strictly descending");
  }
  std::vector<std::pair<double, double>> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) {
    int64_t detected = 0, total = 0, fp = 0, px = 0;
    for (const RocInput& in : data) {
      const PdFaResult r =
          pd_fa(binarize(in.conf, t), in.gt_centers, dist_thresh);
      detected += r.detected;
      total += r.total;
      fp += r.false_pixels;
      px += r.total_pixels;
    }
    const double pd = total == 0 ? 1.0 : double(detected) / double(total);
    const double fa = px == 0 ? 0.0 : double(fp) / double(px);
    out.emplace_back(fa, pd);
  }
  return out;
}

}  // namespace lspst
