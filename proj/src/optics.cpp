#include "lspst/optics.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lspst {

namespace {

constexpr double kPi = 3.14159265358979323846;

// Sum_k (-1)^k / (k! (k+1)!) * (x/2)^(2k+1); converges fast for |x| <= 8.
double j1_series(double x) {
  const double half = 0.5 * x;
  const double q = half * half;
  double term = half;  // k = 0
  double sum = term;
  for (int k = 1; k <= 40; ++k) {
    term *= -q / (double(k) * double(k + 1));
    sum += term;
    if (std::abs(term) < 1e-18 * std::abs(sum) + 1e-300) break;
  }
  return sum;
}

// Hankel expansion J1(x) ~ sqrt(2/(pi x)) [P cos(chi) - Q sin(chi)],
// chi = x - 3pi/4, with (nu,k) coefficients for nu = 1.
double j1_asymptotic(double x) {
  // a[k] = (1,k) = prod_{m=1..k} (4 - (2m-1)^2) / (8m)
  double a[12];
  a[0] = 1.0;
  for (int k = 1; k < 12; ++k) {
    const double odd = 2.0 * k - 1.0;
    a[k] = a[k - 1] * (4.0 - odd * odd) / (8.0 * k);
  }
  const double inv2x = 1.0 / (2.0 * x);
  double p = 0.0, q = 0.0, pw = 1.0;
  for (int k = 0; k < 6; ++k) {
    const double sgn = (k % 2 == 0) ? 1.0 : -1.0;
    p += sgn * a[2 * k] * pw;            // (1/(2x))^(2k)
    q += sgn * a[2 * k + 1] * pw * inv2x;
    pw *= inv2x * inv2x;
  }
  const double chi = x - 0.75 * kPi;
  return std::sqrt(2.0 / (kPi * x)) * (p * std::cos(chi) - q * std::sin(chi));
}

}  // namespace

double bessel_j1(double x) {
  const double ax = std::abs(x);
  const double v = ax <= 8.0 ? j1_series(ax) : j1_asymptotic(ax);
  return x < 0 ? -v : v;
}

double PsfKernel::sum() const {
  double s = 0;
  for (double v : values) s += v;
  return s;
}

double PsfKernel::l2_norm() const {
  double s = 0;
  for (double v : values) s += v * v;
  return std::sqrt(s);
}

namespace {

double airy_intensity(double u) {
  if (std::abs(u) < 1e-8) {
    // [2 J1(u)/u]^2 -> 1 as u -> 0; series: 1 - u^2/4 + ...
    return 1.0 - 0.25 * u * u;
  }
  const double a = 2.0 * bessel_j1(u) / u;
  return a * a;
}

}  // namespace

PsfKernel make_psf(const PsfModel& model, int size) {
  if (size < 1 || size % 2 == 0)
    throw std::invalid_argument("make_psf: size must be odd and positive, got " +
                                std::to_string(size));
  std::visit(
      [](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, GaussianPsf>) {
          if (m.sigma <= 0)
            throw std::invalid_argument("make_psf: sigma must be positive");
        } else if constexpr (std::is_same_v<M, AiryPsf>) {
          if (m.aperture_d <= 0 || m.wavelength <= 0 || m.focal_length <= 0 ||
              m.pixel_pitch <= 0)
            throw std::invalid_argument(
                "make_psf: Airy parameters must be positive");
        } else {
          if (m.alpha <= 0 || m.t <= 0)
            throw std::invalid_argument(
                "make_psf: heat-kernel parameters must be positive");
        }
      },
      model);

  PsfKernel k;
  k.size = size;
  k.values.resize(size_t(size) * size);
  const int half = size / 2;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dy = double(y - half);
      const double dx = double(x - half);
      const double r2 = dx * dx + dy * dy;
      double v = std::visit(
          [&](const auto& m) -> double {
            using M = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<M, GaussianPsf>) {
              return std::exp(-r2 / (2.0 * m.sigma * m.sigma));
            } else if constexpr (std::is_same_v<M, AiryPsf>) {
              const double r = std::sqrt(r2) * m.pixel_pitch;
              const double u =
                  kPi * m.aperture_d * r / (m.wavelength * m.focal_length);
              return airy_intensity(u);
            } else {
              const double s2 = 2.0 * m.alpha * m.t;
              return std::exp(-r2 / (2.0 * s2)) / (2.0 * kPi * s2);
            }
          },
          model);
      k.values[size_t(y) * size + x] = v;
    }
  }
  const double s = k.sum();
  for (double& v : k.values) v /= s;
  return k;
}

std::string psf_describe(const PsfModel& model) {
  std::ostringstream os;
  std::visit(
      [&](const auto& m) {
        using M = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<M, GaussianPsf>) {
          os << "gaussian:sigma=" << m.sigma;
        } else if constexpr (std::is_same_v<M, AiryPsf>) {
          os << "airy:D=" << m.aperture_d << ",lambda=" << m.wavelength
             << ",f=" << m.focal_length << ",pitch=" << m.pixel_pitch;
        } else {
          os << "heat:alpha=" << m.alpha << ",t=" << m.t;
        }
      },
      model);
  return os.str();
}

namespace {

double parse_field(const std::string& body, const std::string& key) {
  const std::string tag = key + "=";
  size_t pos = body.find(tag);
  if (pos == std::string::npos)
    throw std::invalid_argument("psf_parse: missing field " + key);
  return std::stod(body.substr(pos + tag.size()));
}

}  // namespace

PsfModel psf_parse(const std::string& text) {
  const size_t colon = text.find(':');
  if (colon == std::string::npos)
    throw std::invalid_argument("psf_parse: expected variant:params, got " +
                                text);
  const std::string variant = text.substr(0, colon);
  const std::string body = text.substr(colon + 1);
  if (variant == "gaussian")
    return GaussianPsf{parse_field(body, "sigma")};
  if (variant == "airy")
    return AiryPsf{parse_field(body, "D"), parse_field(body, "lambda"),
                   parse_field(body, "f"), parse_field(body, "pitch")};
  if (variant == "heat")
    return HeatKernelPsf{parse_field(body, "alpha"), parse_field(body, "t")};
  throw std::invalid_argument("psf_parse: unknown variant " + variant);
}

}  // namespace lspst
