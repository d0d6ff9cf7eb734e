#include "lspst/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "lspst/rng.hpp"
#include "lspst/t32.hpp"

namespace lspst {

namespace {

constexpr uint64_t kClutterStream = 101;
constexpr uint64_t kNoiseStream = 202;

}  // namespace

void render_target(double amplitude, const PsfKernel& psf, double center_y,
                   double center_x, std::vector<double>& canvas, int h,
                   int w) {
  const double margin = psf.size / 2.0;
  if (center_x < margin || center_x > w - 1 - margin || center_y < margin ||
      center_y > h - 1 - margin)
    throw std::invalid_argument(
        "render_target: center (" + std::to_string(center_x) + "," +
        std::to_string(center_y) + ") violates the K/2 margin of " +
        std::to_string(margin) + " px");
  if (amplitude == 0.0) return;
  const int half = psf.size / 2;
  const int iy0 = int(std::floor(center_y));
  const int ix0 = int(std::floor(center_x));
  const double fy = center_y - iy0;
  const double fx = center_x - ix0;
  // Bilinear splat: the kernel lands on the 4 integer placements around the
  // fractional center; weights sum to 1 so the added energy is exactly A.
  const double wgt[2][2] = {{(1 - fy) * (1 - fx), (1 - fy) * fx},
                            {fy * (1 - fx), fy * fx}};
  for (int sy = 0; sy < 2; ++sy)
    for (int sx = 0; sx < 2; ++sx) {
      const double wv = wgt[sy][sx];
      if (wv == 0.0) continue;
      for (int ky = 0; ky < psf.size; ++ky) {
        const int py = iy0 + sy + ky - half;
        for (int kx = 0; kx < psf.size; ++kx) {
          const int px = ix0 + sx + kx - half;
          canvas[size_t(py) * w + px] += amplitude * wv * psf.at(ky, kx);
        }
      }
    }
}

std::vector<double> synth_clutter(uint64_t seed, int h, int w,
                                  double correlation_length, double strength) {
  std::vector<double> out(size_t(h) * w, 0.0);
  if (strength < 0)
    throw std::invalid_argument("synth_clutter: strength must be >= 0");
  if (strength == 0.0) return out;

  Rng rng(seed);
  std::vector<double> field(size_t(h) * w);
  for (double& v : field) v = rng.gaussian();

  // Separable periodic Gaussian blur with sigma = correlation length.
  const double sigma = std::max(correlation_length, 1e-6);
  const int radius = std::max(1, int(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(size_t(2 * radius + 1));
  double ks = 0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[size_t(i + radius)] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    ks += kernel[size_t(i + radius)];
  }
  for (double& v : kernel) v /= ks;

  std::vector<double> tmp(field.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        int xx = (x + i) % w;
        if (xx < 0) xx += w;
        acc += kernel[size_t(i + radius)] * field[size_t(y) * w + xx];
      }
      tmp[size_t(y) * w + x] = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) {
        int yy = (y + i) % h;
        if (yy < 0) yy += h;
        acc += kernel[size_t(i + radius)] * tmp[size_t(yy) * w + x];
      }
      out[size_t(y) * w + x] = acc;
    }

  // Standardize to zero mean / unit sample std, then scale.
  double mean = 0;
  for (double v : out) mean += v;
  mean /= double(out.size());
  double var = 0;
  for (double v : out) var += (v - mean) * (v - mean);
  var /= double(out.size());
  const double inv = var > 0 ? 1.0 / std::sqrt(var) : 0.0;
  for (double& v : out) v = strength * (v - mean) * inv;
  return out;
}

Scene make_scene(const SceneSpec& spec) {
  const int h = spec.height, w = spec.width;
  if (h < 1 || w < 1) throw std::invalid_argument("make_scene: empty image");
  if (spec.mask_threshold <= 0 || spec.mask_threshold >= 1)
    throw std::invalid_argument("make_scene: mask threshold must be in (0,1)");
  const PsfKernel psf = make_psf(spec.psf, spec.psf_size);

  // Targets closer than K/2 produce ambiguous per-target masks.
  for (size_t i = 0; i < spec.targets.size(); ++i)
    for (size_t j = i + 1; j < spec.targets.size(); ++j) {
      const double dx = spec.targets[i].x - spec.targets[j].x;
      const double dy = spec.targets[i].y - spec.targets[j].y;
      if (std::sqrt(dx * dx + dy * dy) < psf.size / 2.0)
        throw std::invalid_argument(
            "make_scene: targets " + std::to_string(i) + " and " +
            std::to_string(j) + " closer than K/2 px");
    }

  std::vector<double> image = synth_clutter(
      sub_seed(spec.seed, kClutterStream), h, w,
      spec.clutter.correlation_length, spec.clutter.strength);
  std::vector<uint8_t> mask(size_t(h) * w, 0);

  for (const TargetSpec& t : spec.targets) {
    if (t.amplitude <= 0)
      throw std::invalid_argument("make_scene: target amplitude must be > 0");
    std::vector<double> patch(size_t(h) * w, 0.0);
    render_target(t.amplitude, psf, t.y, t.x, patch, h, w);
    double peak = 0;
    for (double v : patch) peak = std::max(peak, v);
    const double cut = spec.mask_threshold * peak;
    for (size_t i = 0; i < patch.size(); ++i) {
      image[i] += patch[i];
      if (patch[i] >= cut && patch[i] > 0) mask[i] = 1;
    }
  }

  if (spec.noise_sigma > 0) {
    Rng rng(sub_seed(spec.seed, kNoiseStream));
    for (double& v : image) v += spec.noise_sigma * rng.gaussian();
  }

  Scene s;
  std::vector<float> img_f(image.size()), mask_f(mask.size());
  for (size_t i = 0; i < image.size(); ++i) img_f[i] = float(image[i]);
  for (size_t i = 0; i < mask.size(); ++i) mask_f[i] = float(mask[i]);
  s.image = Tensor::from_data(Shape{1, 1, h, w}, std::move(img_f));
  s.mask = Tensor::from_data(Shape{1, 1, h, w}, std::move(mask_f));
  s.targets = spec.targets;
  return s;
}

namespace {

std::string entry_name(int id, const char* kind) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d_%s.t32", id, kind);
  return buf;
}

}  // namespace

void write_dataset_entry(const std::string& dir, int id, const Scene& scene) {
  const Shape s = scene.image.shape();
  T32 img{{uint32_t(s.h), uint32_t(s.w)},
          {scene.image.data().begin(), scene.image.data().end()}};
  T32 msk{{uint32_t(s.h), uint32_t(s.w)},
          {scene.mask.data().begin(), scene.mask.data().end()}};
  namespace fs = std::filesystem;
  write_t32((fs::path(dir) / entry_name(id, "img")).string(), img);
  write_t32((fs::path(dir) / entry_name(id, "mask")).string(), msk);
}

void write_manifest(const std::string& dir,
                    const std::vector<DatasetEntry>& entries) {
  namespace fs = std::filesystem;
  std::ofstream f(fs::path(dir) / "manifest.txt");
  if (!f) throw std::runtime_error("cannot write manifest in " + dir);
  for (const auto& e : entries) {
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "%04d", e.id);
    f << "id=" << idbuf << " seed=" << e.seed << " targets=" << e.target_count
      << " size=" << e.height << "x" << e.width << " psf=" << e.psf_text
      << "\n";
  }
}

std::vector<DatasetEntry> read_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string path = (fs::path(dir) / "manifest.txt").string();
  std::ifstream f(path);
  if (!f) throw std::runtime_error("missing dataset manifest: " + path);
  std::vector<DatasetEntry> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    DatasetEntry e;
    std::istringstream is(line);
    std::string kv;
    while (is >> kv) {
      const size_t eq = kv.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("bad manifest line: " + line);
      const std::string key = kv.substr(0, eq);
      const std::string val = kv.substr(eq + 1);
      if (key == "id") e.id = std::stoi(val);
      else if (key == "seed") e.seed = std::stoull(val);
      else if (key == "targets") e.target_count = std::stoi(val);
      else if (key == "size") {
        const size_t x = val.find('x');
        e.height = std::stoi(val.substr(0, x));
        e.width = std::stoi(val.substr(x + 1));
      } else if (key == "psf") e.psf_text = val;
    }
    out.push_back(e);
  }
  return out;
}

LoadedScene load_dataset_entry(const std::string& dir, int id) {
  namespace fs = std::filesystem;
  const std::string ipath = (fs::path(dir) / entry_name(id, "img")).string();
  const std::string mpath = (fs::path(dir) / entry_name(id, "mask")).string();
  if (!fs::exists(ipath))
    throw std::runtime_error("missing dataset file: " + ipath);
  if (!fs::exists(mpath))
    throw std::runtime_error("missing dataset file: " + mpath);
  T32 img = read_t32(ipath);
  T32 msk = read_t32(mpath);
  if (img.dims.size() != 2 || msk.dims != img.dims)
    throw std::runtime_error("corrupt dataset pair for id " +
                             std::to_string(id));
  LoadedScene s;
  const int h = int(img.dims[0]), w = int(img.dims[1]);
  s.image = Tensor::from_data(Shape{1, 1, h, w}, std::move(img.values));
  s.mask = Tensor::from_data(Shape{1, 1, h, w}, std::move(msk.values));
  return s;
}

std::vector<DatasetEntry> generate_dataset(const GenOptions& opt) {
  namespace fs = std::filesystem;
  fs::create_directories(opt.out_dir);
  const PsfKernel kernel = make_psf(opt.psf, opt.psf_size);
  const double margin = kernel.size / 2.0 + 1.0;
  std::vector<DatasetEntry> entries;
  for (int i = 0; i < opt.count; ++i) {
    const uint64_t scene_seed = sub_seed(opt.seed, uint64_t(i) + 1);
    Rng rng(splitmix64(scene_seed));
    SceneSpec spec;
    spec.height = spec.width = opt.size;
    spec.psf = opt.psf;
    spec.psf_size = opt.psf_size;
    spec.clutter = {opt.clutter_corr, opt.clutter_strength};
    spec.noise_sigma = opt.noise_sigma;
    spec.mask_threshold = opt.mask_threshold;
    spec.seed = scene_seed;
    const int want =
        opt.targets_min +
        int(rng.below(uint64_t(opt.targets_max - opt.targets_min + 1)));
    int attempts = 0;
    while (int(spec.targets.size()) < want && attempts < 1000) {
      ++attempts;
      TargetSpec t;
      t.x = rng.uniform(margin, opt.size - 1 - margin);
      t.y = rng.uniform(margin, opt.size - 1 - margin);
      t.amplitude = rng.uniform(opt.amp_min, opt.amp_max);
      bool ok = true;
      for (const auto& u : spec.targets) {
        const double d = std::hypot(t.x - u.x, t.y - u.y);
        if (d < kernel.size) ok = false;  // keep masks unambiguous
      }
      if (ok) spec.targets.push_back(t);
    }
    Scene scene = make_scene(spec);
    write_dataset_entry(opt.out_dir, i, scene);
    entries.push_back(DatasetEntry{i, scene_seed, int(spec.targets.size()),
                                   opt.size, opt.size,
                                   psf_describe(opt.psf)});
  }
  write_manifest(opt.out_dir, entries);
  return entries;
}

}  // namespace lspst
