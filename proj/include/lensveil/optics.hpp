#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <mutex>
#include <string>
#include <tuple>

#include "lensveil/autodiff.hpp"
#include "lensveil/common.hpp"
#include "lensveil/image_io.hpp"
#include "lensveil/zernike.hpp"

namespace lensveil::optics {

using io::Image3;

inline constexpr double kInfiniteDepth = std::numeric_limits<double>::infinity();

// All geometry in micrometers internally; the config keeps the customary
// units of each quantity. pixel_pitch_um is the sensor pitch at the
// reference resolution 1024; lower wavefront resolutions scale the pitch
// up so the modeled sensor extent stays fixed.
struct OpticalConfig {
  double pixel_pitch_um = 3.69;
  std::size_t wavefront_resolution = 128;   // full-scale setting is 1024
  std::array<double, 3> wavelengths_nm{640.0, 550.0, 460.0};
  std::array<double, 3> refractive_indices{1.488, 1.493, 1.499};
  double sensor_distance_mm = 35.5;
  double depth_min_m = 0.33;
  double depth_max_m = 2.0;
  double noise_sigma = 0.01;
  double aperture_fraction = 0.25;  // aperture radius over the smallest pupil half-extent

  static constexpr double kReferenceResolution = 1024.0;

  void validate() const {
    require(is_pow2(wavefront_resolution), "wavefront resolution must be a power of two");
    require(pixel_pitch_um > 0.0 && sensor_distance_mm > 0.0, "distances must be positive");
    require(depth_min_m > 0.0 && depth_max_m > depth_min_m, "bad depth range");
    require(noise_sigma >= 0.0, "noise sigma must be non-negative");
    require(aperture_fraction > 0.0 && aperture_fraction <= 1.0, "bad aperture fraction");
    for (double w : wavelengths_nm) require(w > 0.0, "wavelengths must be positive");
    for (double n : refractive_indices) require(n > 1.0, "refractive index must exceed 1");
  }

  double wavelength_um(int channel) const { return wavelengths_nm[channel] * 1e-3; }
  double sensor_distance_um() const { return sensor_distance_mm * 1e3; }

  double sensor_pitch_um() const {
    return pixel_pitch_um * kReferenceResolution / static_cast<double>(wavefront_resolution);
  }

  double min_wavelength_um() const {
    return *std::min_element(wavelengths_nm.begin(), wavelengths_nm.end()) * 1e-3;
  }

  // Single-transform propagation puts channel c's PSF on the sensor grid
  // when its pupil is sampled at lambda z / (N p).
  double pupil_pitch_um(int channel) const {
    return wavelength_um(channel) * sensor_distance_um() /
           (static_cast<double>(wavefront_resolution) * sensor_pitch_um());
  }

  // One physical aperture shared by all channels, sized against the
  // tightest (shortest-wavelength) pupil grid.
  double aperture_radius_um() const {
    return aperture_fraction * static_cast<double>(wavefront_resolution) / 2.0 *
           min_wavelength_um() * sensor_distance_um() /
           (static_cast<double>(wavefront_resolution) * sensor_pitch_um());
  }

  // Fraction of channel c's grid half-width covered by the aperture.
  double channel_disk_fraction(int channel) const {
    return aperture_fraction * min_wavelength_um() / wavelength_um(channel);
  }
};

// One unit-sum PSF per wavelength channel at a fixed object depth.
struct PsfStack {
  double depth_m = kInfiniteDepth;
  std::array<Tensor, 3> psfs;
};

struct SensorImage {
  std::array<Tensor, 3> channels;
  std::int64_t source_id = -1;
  double depth_m = kInfiniteDepth;
  std::uint64_t noise_seed = 0;
};

// Phi = (2 pi dn / lambda) H with dn = n - 1; wavelength in nm, H in um.
inline ad::Var phase_map(ad::Var height_um, double wavelength_nm, double refractive_index) {
  require(wavelength_nm > 0.0, "wavelength must be positive");
  const double scale = 2.0 * M_PI * (refractive_index - 1.0) / (wavelength_nm * 1e-3);
  return affine(height_um, scale);
}

inline Tensor phase_map(const Tensor& height_um, double wavelength_nm, double refractive_index) {
  ad::Tape tape;
  return phase_map(tape.constant(height_um), wavelength_nm, refractive_index).value();
}

namespace detail {

// pi/(lambda z) (x'^2 + y'^2) plus the same factor for a finite object
// depth; constant w.r.t. the lens coefficients. Coordinates live on the
// channel's pupil grid.
inline Tensor pupil_quadratic_phase(const OpticalConfig& cfg, double depth_m, int channel) {
  const std::size_t res = cfg.wavefront_resolution;
  const double lambda = cfg.wavelength_um(channel);
  const double pitch = cfg.pupil_pitch_um(channel);
  double factor = M_PI / (lambda * cfg.sensor_distance_um());
  if (std::isfinite(depth_m)) factor += M_PI / (lambda * depth_m * 1e6);
  Tensor t = Tensor::zeros({res, res});
  const double half = static_cast<double>(res) / 2.0;
  for (std::size_t r = 0; r < res; ++r) {
    const double y = (static_cast<double>(r) + 0.5 - half) * pitch;
    for (std::size_t c = 0; c < res; ++c) {
      const double x = (static_cast<double>(c) + 0.5 - half) * pitch;
      t.re[r * res + c] = factor * (x * x + y * y);
    }
  }
  return t;
}

inline Tensor aperture_mask(const zernike::ZernikeBasis& basis) {
  Tensor m = Tensor::zeros({basis.resolution, basis.resolution});
  for (std::size_t i = 0; i < basis.mask.size(); ++i) m.re[i] = basis.mask[i] ? 1.0 : 0.0;
  return m;
}

// Channel bases are cached: read-only after construction, shared freely.
inline const zernike::ZernikeBasis& channel_basis(std::size_t resolution, int q,
                                                  double fraction) {
  struct Key {
    std::size_t res;
    int q;
    long frac_milli;
    bool operator<(const Key& o) const {
      return std::tie(res, q, frac_milli) < std::tie(o.res, o.q, o.frac_milli);
    }
  };
  static std::map<Key, zernike::ZernikeBasis> cache;
  static std::mutex mutex;
  const Key key{resolution, q, std::lround(fraction * 1e6)};
  std::lock_guard<std::mutex> lock(mutex);
  auto it = cache.find(key);
  if (it == cache.end())
    it = cache.emplace(key, zernike::build_basis_scaled(resolution, q, fraction)).first;
  return it->second;
}

}  // namespace detail

// PSF of the lens for one wavelength channel: the aperture field
// A exp(i Phi) exp(i pi/(lambda z) r^2) [exp(i pi/(lambda depth) r^2)]
// propagated by a single Fourier transform, centered, and normalized to
// unit sum. The depth factor is dropped for a source at infinity. Each
// channel samples the pupil at lambda z / (N p) so all three PSFs land on
// one sensor grid; the surface height is re-sampled onto that channel grid
// through a disk-scaled basis.
inline ad::Var psf(ad::Tape& tape, ad::Var alpha, const zernike::ZernikeBasis& basis,
                   const OpticalConfig& cfg, double depth_m, int channel) {
  require(channel >= 0 && channel < 3, "channel index out of range");
  require(depth_m > 0.0, "object depth must be positive");
  require(basis.resolution == cfg.wavefront_resolution,
          "basis resolution does not match wavefront resolution");
  const zernike::ZernikeBasis& chan = detail::channel_basis(
      cfg.wavefront_resolution, basis.q, cfg.channel_disk_fraction(channel));
  ad::Var height_um = zernike::height_map(tape, alpha, chan);
  ad::Var phi = phase_map(height_um, cfg.wavelengths_nm[channel],
                          cfg.refractive_indices[channel]);
  ad::Var quad = tape.constant(detail::pupil_quadratic_phase(cfg, depth_m, channel));
  ad::Var mask = tape.constant(detail::aperture_mask(chan));
  ad::Var pupil = mask * cis(phi + quad);
  ad::Var intensity = fftshift2(cmod2(dft2(pupil)));
  return intensity / sum(intensity);
}

inline Tensor psf(const zernike::LensProfile& profile, const zernike::ZernikeBasis& basis,
                  const OpticalConfig& cfg, double depth_m, int channel) {
  ad::Tape tape;
  ad::Var alpha = tape.leaf(profile.as_tensor(), false);
  return psf(tape, alpha, basis, cfg, depth_m, channel).value();
}

// Channel c sees only wavelength c (identity sensor coupling).
inline std::array<ad::Var, 3> psf_stack_vars(ad::Tape& tape, ad::Var alpha,
                                             const zernike::ZernikeBasis& basis,
                                             const OpticalConfig& cfg, double depth_m) {
  return {psf(tape, alpha, basis, cfg, depth_m, 0), psf(tape, alpha, basis, cfg, depth_m, 1),
          psf(tape, alpha, basis, cfg, depth_m, 2)};
}

inline PsfStack psf_stack(const zernike::LensProfile& profile,
                          const zernike::ZernikeBasis& basis, const OpticalConfig& cfg,
                          double depth_m) {
  ad::Tape tape;
  ad::Var alpha = tape.leaf(profile.as_tensor(), false);
  auto vars = psf_stack_vars(tape, alpha, basis, cfg, depth_m);
  PsfStack stack;
  stack.depth_m = depth_m;
  for (int c = 0; c < 3; ++c) stack.psfs[c] = vars[c].value();
  return stack;
}

// Per-sample Gaussian sensor noise, drawn once and entered as a constant.
inline Tensor noise_field(const Shape& shape, double sigma, Rng& rng) {
  Tensor t = Tensor::zeros(shape);
  if (sigma > 0.0)
    for (double& v : t.re) v = rng.gaussian(0.0, sigma);
  return t;
}

// Circular FFT convolution of a scene channel with its PSF, plus seeded
// Gaussian noise. The kernel is stored center-origin; an integer-factor
// block-sum downsample bridges a finer PSF grid to the scene grid, so the
// learned lens and fixed baseline kernels share this single path.
inline std::array<ad::Var, 3> render_vars(ad::Tape& tape, const std::array<ad::Var, 3>& scene,
                                          const std::array<ad::Var, 3>& kernels,
                                          double noise_sigma, std::uint64_t seed) {
  require(noise_sigma >= 0.0, "noise sigma must be non-negative");
  Rng rng(seed);
  std::array<ad::Var, 3> out;
  for (int c = 0; c < 3; ++c) {
    const Shape& ss = scene[c].value().shape;
    const Shape& ks = kernels[c].value().shape;
    require(ss.size() == 2 && ks.size() == 2, "render expects rank-2 channels");
    require(ks[0] >= ss[0] && ks[1] >= ss[1], "PSF support smaller than scene");
    require(ks[0] % ss[0] == 0 && ks[1] % ss[1] == 0,
            "PSF support must be an integer multiple of the scene size");
    ad::Var k = kernels[c];
    const int factor = static_cast<int>(ks[0] / ss[0]);
    if (factor > 1) k = box_down_sum(k, factor);
    ad::Var conv = conv2_circular(scene[c], fftshift2(k));
    ad::Var noise = tape.constant(noise_field(ss, noise_sigma, rng));
    out[c] = conv + noise;
  }
  return out;
}

inline SensorImage render(const Image3& scene, const PsfStack& stack, double noise_sigma,
                          std::uint64_t seed) {
  ad::Tape tape;
  std::array<ad::Var, 3> scene_v, kernel_v;
  for (int c = 0; c < 3; ++c) {
    scene_v[c] = tape.constant(scene[c]);
    kernel_v[c] = tape.constant(stack.psfs[c]);
  }
  auto out = render_vars(tape, scene_v, kernel_v, noise_sigma, seed);
  SensorImage img;
  img.depth_m = stack.depth_m;
  img.noise_seed = seed;
  for (int c = 0; c < 3; ++c) img.channels[c] = out[c].value();
  return img;
}

}  // namespace lensveil::optics
