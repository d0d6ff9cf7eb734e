#ifndef LSPST_OPTICS_HPP
#define LSPST_OPTICS_HPP

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

namespace lspst {

// First-kind Bessel function of order 1. Power series up to |x| <= 8, Hankel
// asymptotic expansion beyond; absolute error <= 1e-9 on |x| <= 30.
double bessel_j1(double x);

struct GaussianPsf {
  double sigma;  // pixels
};

// Diffraction-limited circular-aperture pattern sampled on the detector grid.
struct AiryPsf {
  double aperture_d;   // meters
  double wavelength;   // meters
  double focal_length; // meters
  double pixel_pitch;  // meters per pixel
};

// Fundamental solution of isotropic heat diffusion; variance 2*alpha*t.
struct HeatKernelPsf {
  double alpha;  // diffusion coefficient
  double t;      // diffusion time
};

using PsfModel = std::variant<GaussianPsf, AiryPsf, HeatKernelPsf>;

// Odd-sized, nonnegative, sum-normalized kernel with its peak at the center.
struct PsfKernel {
  int size = 0;                 // K, odd
  std::vector<double> values;   // K*K row-major

  double at(int y, int x) const { return values[size_t(y) * size + x]; }
  double sum() const;
  double l2_norm() const;
};

// Samples the model on a centered K x K grid and sum-normalizes.
PsfKernel make_psf(const PsfModel& model, int size);

// Human-readable tag such as "gaussian:sigma=1.5" (used by dataset manifests).
std::string psf_describe(const PsfModel& model);
// Parses the same format back; throws on unknown variants.
PsfModel psf_parse(const std::string& text);

}  // namespace lspst

#endif
