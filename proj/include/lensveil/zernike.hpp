#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "lensveil/autodiff.hpp"
#include "lensveil/tensor.hpp"

namespace lensveil::zernike {

// 1-based Noll index -> (radial degree n, signed azimuthal frequency m).
// Even j carries the cosine (m >= 0) term, odd j the sine (m < 0) term.
inline std::pair<int, int> noll_to_nm(int j) {
  require(j >= 1, "Noll index starts at 1");
  int n = 0;
  int rem = j;
  while (rem > n + 1) {
    rem -= n + 1;
    n += 1;
  }
  int m_abs = 0;
  if (n % 2 == 0) {
    m_abs = 2 * (rem / 2);
  } else {
    m_abs = 2 * ((rem - 1) / 2) + 1;
  }
  const int m = (m_abs == 0) ? 0 : (j % 2 == 0 ? m_abs : -m_abs);
  return {n, m};
}

namespace detail {

// n <= 20 is far beyond the q = 15 default (n <= 4); factorials stay exact.
inline double factorial(int k) {
  static const std::array<double, 21> table = [] {
    std::array<double, 21> t{};
    t[0] = 1.0;
    for (int i = 1; i <= 20; ++i) t[i] = t[i - 1] * static_cast<double>(i);
    return t;
  }();
  return table[static_cast<std::size_t>(k)];
}

inline double radial(int n, int m_abs, double rho) {
  double out = 0.0;
  for (int k = 0; k <= (n - m_abs) / 2; ++k) {
    const double c = (k % 2 == 0 ? 1.0 : -1.0) * factorial(n - k) /
                     (factorial(k) * factorial((n + m_abs) / 2 - k) *
                      factorial((n - m_abs) / 2 - k));
    out += c * std::pow(rho, n - 2 * k);
  }
  return out;
}

}  // namespace detail

// Noll-normalized value: the disk average of Z_j^2 is 1.
inline double eval_term(int j, double rho, double theta) {
  require(rho >= 0.0 && rho <= 1.0, "rho must lie in [0, 1]");
  const auto [n, m] = noll_to_nm(j);
  const int m_abs = m < 0 ? -m : m;
  const double r = detail::radial(n, m_abs, rho);
  if (m == 0) return std::sqrt(static_cast<double>(n + 1)) * r;
  const double norm = std::sqrt(2.0 * static_cast<double>(n + 1));
  const double ang = m > 0 ? std::cos(m_abs * theta) : std::sin(m_abs * theta);
  return norm * r * ang;
}

// Zernike terms sampled on a centered unit-disk grid. The grid spans
// [-1, 1] on both axes with samples at pixel centers; `matrix` holds one
// term per row (zero outside the aperture mask) so a height map is a
// single vector-matrix product. A disk_fraction below 1 shrinks the
// aperture to that fraction of the grid half-width, with the polynomials
// still spanning the (smaller) unit disk.
struct ZernikeBasis {
  std::size_t resolution = 0;
  int q = 0;
  double disk_fraction = 1.0;
  Tensor matrix;                  // q x resolution^2
  std::vector<std::uint8_t> mask; // resolution^2, 1 inside the disk

  std::size_t samples() const { return resolution * resolution; }

  Tensor term(int j) const {  // 1-based
    require(j >= 1 && j <= q, "term index out of range");
    Tensor t = Tensor::zeros({resolution, resolution});
    const std::size_t n = samples();
    for (std::size_t i = 0; i < n; ++i) t.re[i] = matrix.re[(j - 1) * n + i];
    return t;
  }
};

inline double grid_coord(std::size_t i, std::size_t resolution) {
  return -1.0 + (static_cast<double>(i) + 0.5) * 2.0 / static_cast<double>(resolution);
}

inline ZernikeBasis build_basis_scaled(std::size_t resolution, int q, double disk_fraction) {
  require(resolution >= 8, "basis resolution must be at least 8");
  require(q >= 1, "need at least one term");
  require(disk_fraction > 0.0 && disk_fraction <= 1.0, "disk fraction must be in (0, 1]");
  ZernikeBasis basis;
  basis.resolution = resolution;
  basis.q = q;
  basis.disk_fraction = disk_fraction;
  basis.mask.assign(resolution * resolution, 0);
  basis.matrix = Tensor::zeros({static_cast<std::size_t>(q), resolution * resolution});
  const std::size_t n = resolution * resolution;
  for (std::size_t row = 0; row < resolution; ++row) {
    const double y = grid_coord(row, resolution);
    for (std::size_t col = 0; col < resolution; ++col) {
      const double x = grid_coord(col, resolution);
      const double rho = std::hypot(x, y) / disk_fraction;
      if (rho > 1.0) continue;
      const std::size_t i = row * resolution + col;
      basis.mask[i] = 1;
      const double theta = std::atan2(y, x);
      for (int j = 1; j <= q; ++j)
        basis.matrix.re[static_cast<std::size_t>(j - 1) * n + i] = eval_term(j, rho, theta);
    }
  }
  return basis;
}

inline ZernikeBasis build_basis(std::size_t resolution, int q) {
  return build_basis_scaled(resolution, q, 1.0);
}

// The trainable optical parameter set: q Noll coefficients, in micrometers
// of surface height.
struct LensProfile {
  std::vector<double> alpha;

  static LensProfile zero(int q = 15) {
    LensProfile p;
    p.alpha.assign(static_cast<std::size_t>(q), 0.0);
    return p;
  }

  // Defocus-dominated start: fourth coefficient -51, all others zero.
  static LensProfile default_init(int q = 15) {
    LensProfile p = zero(q);
    require(q >= 4, "default init needs at least 4 terms");
    p.alpha[3] = -51.0;
    return p;
  }

  Tensor as_tensor() const { return Tensor::from({1, alpha.size()}, alpha); }
};

// H = sum_j alpha_j Z_j, recorded on the tape (differentiable w.r.t. alpha).
inline ad::Var height_map(ad::Tape& tape, ad::Var alpha, const ZernikeBasis& basis) {
  const Tensor& a = alpha.value();
  require(a.size() == static_cast<std::size_t>(basis.q),
          "coefficient count does not match basis");
  ad::Var flat_basis = tape.constant(basis.matrix);
  ad::Var row = reshape(alpha, {1, a.size()});
  ad::Var h = matmul(row, flat_basis);  // 1 x res^2
  return reshape(h, {basis.resolution, basis.resolution});
}

inline Tensor height_map(const LensProfile& profile, const ZernikeBasis& basis) {
  ad::Tape tape;
  ad::Var alpha = tape.leaf(profile.as_tensor(), false);
  return height_map(tape, alpha, basis).value();
}

}  // namespace lensveil::zernike
