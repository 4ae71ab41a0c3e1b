#include <catch2/catch_amalgamated.hpp>

#include "lensveil/optics.hpp"
#include "oracles.hpp"

using namespace lensveil;
using io::Image3;

namespace {

optics::OpticalConfig desk_config(std::size_t res = 64) {
  optics::OpticalConfig cfg;
  cfg.wavefront_resolution = res;
  return cfg;
}

double psf_sum(const Tensor& p) {
  double s = 0.0;
  for (double v : p.re) s += v;
  return s;
}

// radius (in samples) of the first minimum along the central row
double first_null_radius(const Tensor& p) {
  const std::size_t n = p.shape[0];
  const std::size_t mid = n / 2;
  double prev = p.re[mid * n + mid];
  for (std::size_t k = 1; k < n / 2; ++k) {
    const double cur = p.re[mid * n + mid + k];
    if (cur > prev) return static_cast<double>(k) - 1.0;
    prev = cur;
  }
  return static_cast<double>(n / 2);
}

Image3 constant_scene(std::size_t n, double r, double g, double b) {
  return {Tensor::full({n, n}, r), Tensor::full({n, n}, g), Tensor::full({n, n}, b)};
}

}  // namespace

TEST_CASE("phase map: zero height gives zero phase") {
  const Tensor h = Tensor::zeros({8, 8});
  const Tensor phi = optics::phase_map(h, 550.0, 1.493);
  for (double v : phi.re) REQUIRE(v == 0.0);
}

TEST_CASE("phase map: height of lambda over dn gives 2 pi") {
  // H = lambda/dn with lambda 550 nm, dn 0.493 -> phase 2 pi
  const double h_um = 0.550 / 0.493;
  const Tensor phi = optics::phase_map(Tensor::full({4, 4}, h_um), 550.0, 1.493);
  for (double v : phi.re) REQUIRE(v == Catch::Approx(2.0 * M_PI).epsilon(1e-12));
}

TEST_CASE("phase map: 0.64 um at 640 nm and n = 1.488") {
  const Tensor phi = optics::phase_map(Tensor::full({2, 2}, 0.64), 640.0, 1.488);
  for (double v : phi.re) REQUIRE(v == Catch::Approx(2.0 * M_PI * 0.488).epsilon(1e-12));
}

TEST_CASE("phase map rejects non-positive wavelengths") {
  ad::Tape tape;
  ad::Var h = tape.constant(Tensor::zeros({4, 4}));
  REQUIRE_THROWS_AS(optics::phase_map(h, 0.0, 1.5), std::invalid_argument);
}

TEST_CASE("flat lens at infinity: centered symmetric pattern with unit sum") {
  const auto cfg = desk_config();
  const auto basis = zernike::build_basis(cfg.wavefront_resolution, 15);
  const Tensor p = optics::psf(zernike::LensProfile::zero(15), basis, cfg,
                               optics::kInfiniteDepth, 1);
  REQUIRE(psf_sum(p) == Catch::Approx(1.0).margin(1e-6));
  const std::size_t n = p.shape[0];
  // peak lands at the center bin
  std::size_t arg = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p.re[i] > p.re[arg]) arg = i;
  REQUIRE(arg == (n / 2) * n + n / 2);
}

TEST_CASE("zero-aberration PSF is invariant under 180 degree rotation") {
  const auto cfg = desk_config();
  const auto basis = zernike::build_basis(cfg.wavefront_resolution, 15);
  for (double depth : {1.0, 0.5}) {
    const Tensor p = optics::psf(zernike::LensProfile::zero(15), basis, cfg, depth, 0);
    const std::size_t n = p.shape[0];
    double worst = 0.0;
    // rotation center is the fftshift center (n/2, n/2); skip the wrap row/col
    for (std::size_t r = 1; r < n; ++r)
      for (std::size_t c = 1; c < n; ++c)
        worst = std::max(worst, std::abs(p.re[r * n + c] - p.re[(n - r) * n + (n - c)]));
    REQUIRE(worst < 1e-12);
  }
}

TEST_CASE("default-init lens at 550 nm, 1 m: spread PSF with unit sum") {
  const auto cfg = desk_config();
  const auto basis = zernike::build_basis(cfg.wavefront_resolution, 15);
  const Tensor p = optics::psf(zernike::LensProfile::default_init(15), basis, cfg, 1.0, 1);
  REQUIRE(psf_sum(p) == Catch::Approx(1.0).margin(1e-6));
  double peak = 0.0;
  for (double v : p.re) peak = std::max(peak, v);
  // strongly blurred: energy is spread far beyond a single bin
  REQUIRE(peak < 0.05);
}

TEST_CASE("psf rejects non-positive finite depths") {
  const auto cfg = desk_config();
  const auto basis = zernike::build_basis(cfg.wavefront_resolution, 15);
  ad::Tape tape;
  ad::Var alpha = tape.leaf(zernike::LensProfile::zero(15).as_tensor(), true);
  REQUIRE_THROWS_AS(optics::psf(tape, alpha, basis, cfg, -0.5, 0), std::invalid_argument);
  REQUIRE_THROWS_AS(optics::psf(tape, alpha, basis, cfg, 0.0, 0), std::invalid_argument);
}

TEST_CASE("psf stack: three unit-sum channels, blue has the narrowest lobe") {
  const auto cfg = desk_config(128);
  const auto basis = zernike::build_basis(cfg.wavefront_resolution, 15);
  const auto stack = optics::psf_stack(zernike::LensProfile::zero(15), basis, cfg,
                                       optics::kInfiniteDepth);
  for (const Tensor& p : stack.psfs) REQUIRE(psf_sum(p) == Catch::Approx(1.0).margin(1e-6));
  const double red = first_null_radius(stack.psfs[0]);
  const double blue = first_null_radius(stack.psfs[2]);
  REQUIRE(blue < red);  // diffraction scale grows with wavelength
}

TEST_CASE("psf stack is bit-deterministic") {
  const auto cfg = desk_config();
  const auto basis = zernike::build_basis(cfg.wavefront_resolution, 15);
  const auto a = optics::psf_stack(zernike::LensProfile::default_init(15), basis, cfg, 1.3);
  const auto b = optics::psf_stack(zernike::LensProfile::default_init(15), basis, cfg, 1.3);
  for (int c = 0; c < 3; ++c) REQUIRE(bit_equal(a.psfs[c], b.psfs[c]));
}

TEST_CASE("depth term: PSFs at 0.33 m and 2 m differ") {
  const auto cfg = desk_config();
  const auto basis = zernike::build_basis(cfg.wavefront_resolution, 15);
  const auto near = optics::psf_stack(zernike::LensProfile::default_init(15), basis, cfg, 0.33);
  const auto far = optics::psf_stack(zernike::LensProfile::default_init(15), basis, cfg, 2.0);
  REQUIRE(l1_diff(near.psfs[1], far.psfs[1]) > 1e-4);
}

TEST_CASE("render with a centered delta kernel and zero noise is the identity") {
  Rng rng(5);
  Image3 scene = constant_scene(16, 0, 0, 0);
  for (Tensor& ch : scene)
    for (double& v : ch.re) v = rng.uniform();
  Tensor delta = Tensor::zeros({16, 16});
  delta.re[8 * 16 + 8] = 1.0;
  optics::PsfStack stack;
  stack.psfs = {delta, delta, delta};
  const auto out = optics::render(scene, stack, 0.0, 1);
  for (int c = 0; c < 3; ++c) REQUIRE(max_abs_diff(out.channels[c], scene[c]) < 1e-12);
}

TEST_CASE("unit-mass kernels preserve constant scenes") {
  Image3 scene = constant_scene(16, 0.3, 0.5, 0.7);
  Rng rng(6);
  Tensor k = Tensor::zeros({16, 16});
  double total = 0.0;
  for (double& v : k.re) {
    v = rng.uniform();
    total += v;
  }
  for (double& v : k.re) v /= total;
  optics::PsfStack stack;
  stack.psfs = {k, k, k};
  const auto out = optics::render(scene, stack, 0.0, 1);
  const double expect[3] = {0.3, 0.5, 0.7};
  for (int c = 0; c < 3; ++c)
    for (double v : out.channels[c].re) REQUIRE(v == Catch::Approx(expect[c]).margin(1e-9));
}

TEST_CASE("render matches the direct spatial convolution oracle") {
  Rng rng(7);
  Image3 scene = constant_scene(16, 0, 0, 0);
  for (Tensor& ch : scene)
    for (double& v : ch.re) v = rng.uniform();
  Tensor k = Tensor::zeros({16, 16});
  double total = 0.0;
  for (double& v : k.re) {
    v = rng.uniform();
    total += v;
  }
  for (double& v : k.re) v /= total;
  optics::PsfStack stack;
  stack.psfs = {k, k, k};
  const auto out = optics::render(scene, stack, 0.0, 1);

  // oracle path: explicit center-origin shift, then the O(N^4) sum
  Tensor shifted = Tensor::zeros({16, 16});
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 16; ++c)
      shifted.re[((r + 8) % 16) * 16 + (c + 8) % 16] = k.re[r * 16 + c];
  for (int c = 0; c < 3; ++c) {
    const Tensor direct = oracles::direct_conv2_circular(scene[static_cast<std::size_t>(c)], shifted);
    REQUIRE(max_abs_diff(out.channels[static_cast<std::size_t>(c)], direct) < 1e-6);
  }
}

TEST_CASE("render rejects bad noise and undersized kernels") {
  Image3 scene = constant_scene(16, 0.5, 0.5, 0.5);
  optics::PsfStack stack;
  stack.psfs = {Tensor::zeros({8, 8}), Tensor::zeros({8, 8}), Tensor::zeros({8, 8})};
  REQUIRE_THROWS_AS(optics::render(scene, stack, 0.0, 1), std::invalid_argument);
  stack.psfs = {Tensor::zeros({16, 16}), Tensor::zeros({16, 16}), Tensor::zeros({16, 16})};
  REQUIRE_THROWS_AS(optics::render(scene, stack, -0.1, 1), std::invalid_argument);
}

TEST_CASE("render with zero sigma is a pure function; seeded noise reproduces") {
  Image3 scene = constant_scene(16, 0.2, 0.4, 0.6);
  Tensor delta = Tensor::zeros({16, 16});
  delta.re[8 * 16 + 8] = 1.0;
  optics::PsfStack stack;
  stack.psfs = {delta, delta, delta};
  const auto a = optics::render(scene, stack, 0.0, 1);
  const auto b = optics::render(scene, stack, 0.0, 999);
  for (int c = 0; c < 3; ++c) REQUIRE(bit_equal(a.channels[c], b.channels[c]));
  const auto n1 = optics::render(scene, stack, 0.05, 42);
  const auto n2 = optics::render(scene, stack, 0.05, 42);
  const auto n3 = optics::render(scene, stack, 0.05, 43);
  for (int c = 0; c < 3; ++c) {
    REQUIRE(bit_equal(n1.channels[c], n2.channels[c]));
  }
  REQUIRE(max_abs_diff(n1.channels[0], n3.channels[0]) > 0.0);
}

TEST_CASE("wavefront-resolution PSF is block-summed onto the scene grid") {
  // a 32x32 kernel with unit mass renders a 16x16 constant scene unchanged
  Image3 scene = constant_scene(16, 0.25, 0.5, 0.75);
  const auto cfg = desk_config(32);
  const auto basis = zernike::build_basis(32, 15);
  const auto stack = optics::psf_stack(zernike::LensProfile::default_init(15), basis, cfg, 1.0);
  const auto out = optics::render(scene, stack, 0.0, 1);
  const double expect[3] = {0.25, 0.5, 0.75};
  for (int c = 0; c < 3; ++c)
    for (double v : out.channels[c].re) REQUIRE(v == Catch::Approx(expect[c]).margin(1e-9));
}

TEST_CASE("psf responds continuously to coefficient perturbations") {
  const auto cfg = desk_config();
  const auto basis = zernike::build_basis(cfg.wavefront_resolution, 15);
  zernike::LensProfile p = zernike::LensProfile::default_init(15);
  const Tensor base = optics::psf(p, basis, cfg, 1.0, 1);
  p.alpha[6] += 1e-6;
  const Tensor bumped = optics::psf(p, basis, cfg, 1.0, 1);
  REQUIRE(l1_diff(base, bumped) < 1e-3);  // O(1e-6) input change, small L1 response
  REQUIRE(l1_diff(base, bumped) > 0.0);
}
