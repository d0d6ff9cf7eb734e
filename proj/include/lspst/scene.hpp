#ifndef LSPST_SCENE_HPP
#define LSPST_SCENE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "lspst/optics.hpp"
#include "lspst/tensor.hpp"

namespace lspst {

struct TargetSpec {
  double x = 0;          // subpixel column
  double y = 0;          // subpixel row
  double amplitude = 1;  // integrated intensity added to the canvas
};

struct ClutterSpec {
  double correlation_length = 4.0;  // pixels
  double strength = 0.0;            // std of the clutter field
};

struct SceneSpec {
  int height = 64;
  int width = 64;
  std::vector<TargetSpec> targets;
  PsfModel psf = GaussianPsf{1.0};
  int psf_size = 11;
  ClutterSpec clutter;
  double noise_sigma = 0.0;
  double mask_threshold = 0.5;  // tau in (0,1), fraction of per-target peak
  uint64_t seed = 0;
};

struct Scene {
  Tensor image;  // (1,1,h,w)
  Tensor mask;   // (1,1,h,w), values 0/1
  std::vector<TargetSpec> targets;
};

// Adds amplitude * kernel at a subpixel center via bilinear splatting. The
// added energy equals the amplitude (normalized kernel, splat weights sum
// to 1). Centers must respect a K/2 margin from the image border.
void render_target(double amplitude, const PsfKernel& psf, double center_y,
                   double center_x, std::vector<double>& canvas, int h, int w);

// Gaussian-blurred white noise, standardized then scaled; deterministic in
// the seed. Returns h*w doubles.
std::vector<double> synth_clutter(uint64_t seed, int h, int w,
                                  double correlation_length, double strength);

Scene make_scene(const SceneSpec& spec);

// Dataset directory: NNNN_img.t32 / NNNN_mask.t32 pairs plus manifest.txt
// with one `id=NNNN seed=... targets=<k> size=<h>x<w> psf=<variant:params>`
// line per scene.
struct DatasetEntry {
  int id = 0;
  uint64_t seed = 0;
  int target_count = 0;
  int height = 0, width = 0;
  std::string psf_text;
};

void write_dataset_entry(const std::string& dir, int id, const Scene& scene);
void write_manifest(const std::string& dir,
                    const std::vector<DatasetEntry>& entries);
std::vector<DatasetEntry> read_manifest(const std::string& dir);

struct LoadedScene {
  Tensor image;
  Tensor mask;
};
LoadedScene load_dataset_entry(const std::string& dir, int id);

// Options for seeded dataset sweeps (the `gen` subcommand).
struct GenOptions {
  std::string out_dir;
  int count = 8;
  int size = 64;
  uint64_t seed = 0;
  int targets_min = 1;
  int targets_max = 4;
  double amp_min = 1.0;
  double amp_max = 3.0;
  PsfModel psf = GaussianPsf{1.0};
  int psf_size = 11;
  double clutter_strength = 0.25;
  double clutter_corr = 4.0;
  double noise_sigma = 0.05;
  double mask_threshold = 0.5;
};

// Generates `count` scenes with randomized target lists; pure function of
// the options. Returns the manifest entries written.
std::vector<DatasetEntry> generate_dataset(const GenOptions& opt);

}  // namespace lspst

#endif
