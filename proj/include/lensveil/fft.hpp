#pragma once

#include <complex>
#include <vector>

#include "lensveil/common.hpp"
#include "lensveil/tensor.hpp"

namespace lensveil::fft {

using cplx = std::complex<double>;

// In-place iterative radix-2 FFT, unnormalized in both directions.
// Twiddles are computed per call so the routine is reentrant.
inline void fft_pow2(cplx* x, std::size_t n, bool inverse) {
  require(is_pow2(n), "fft size must be a power of two");
  if (n == 1) return;

  // bit reversal
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(x[i], x[j]);
  }

  const double sign = inverse ? 1.0 : -1.0;
  std::vector<cplx> w(n / 2);
  for (std::size_t k = 0; k < n / 2; ++k) {
    const double a = sign * 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(n);
    w[k] = {std::cos(a), std::sin(a)};
  }

  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t step = n / len;
    for (std::size_t i = 0; i < n; i += len) {
      for (std::size_t k = 0; k < len / 2; ++k) {
        const cplx t = x[i + k + len / 2] * w[k * step];
        x[i + k + len / 2] = x[i + k] - t;
        x[i + k] += t;
      }
    }
  }
}

// 2-D transform on a row-major square buffer, unnormalized.
inline void fft2_pow2(cplx* data, std::size_t rows, std::size_t cols, bool inverse) {
  require(is_pow2(rows) && is_pow2(cols), "fft2 dimensions must be powers of two");
  for (std::size_t r = 0; r < rows; ++r) fft_pow2(data + r * cols, cols, inverse);
  std::vector<cplx> col(rows);
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t r = 0; r < rows; ++r) col[r] = data[r * cols + c];
    fft_pow2(col.data(), rows, inverse);
    for (std::size_t r = 0; r < rows; ++r) data[r * cols + c] = col[r];
  }
}

inline std::vector<cplx> to_cplx(const Tensor& t) {
  std::vector<cplx> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = t.citem(i);
  return out;
}

inline Tensor from_cplx(const std::vector<cplx>& v, Shape shape) {
  Tensor t = Tensor::zeros_complex(std::move(shape));
  for (std::size_t i = 0; i < v.size(); ++i) {
    t.re[i] = v[i].real();
    t.im[i] = v[i].imag();
  }
  return t;
}

// Plain (non-tape) 2-D DFT of a square power-of-two tensor.
// Forward is unnormalized; inverse carries the 1/N^2 factor.
inline Tensor dft2(const Tensor& field, bool inverse) {
  require(field.shape.size() == 2 && field.shape[0] == field.shape[1],
          "dft2 expects a square 2-D input");
  require(is_pow2(field.shape[0]), "dft2 expects a power-of-two size");
  auto buf = to_cplx(field);
  fft2_pow2(buf.data(), field.shape[0], field.shape[1], inverse);
  if (inverse) {
    const double scale = 1.0 / static_cast<double>(field.size());
    for (auto& v : buf) v *= scale;
  }
  return from_cplx(buf, field.shape);
}

// Circular convolution of two real same-shape square tensors via the FFT.
inline Tensor conv2_circular(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "conv2 operands must share a shape");
  auto fa = to_cplx(a);
  auto fb = to_cplx(b);
  const std::size_t rows = a.shape[0], cols = a.shape[1];
  fft2_pow2(fa.data(), rows, cols, false);
  fft2_pow2(fb.data(), rows, cols, false);
  for (std::size_t i = 0; i < fa.size(); ++i) fa[i] *= fb[i];
  fft2_pow2(fa.data(), rows, cols, true);
  Tensor out = Tensor::zeros(a.shape);
  const double scale = 1.0 / static_cast<double>(a.size());
  for (std::size_t i = 0; i < fa.size(); ++i) out.re[i] = fa[i].real() * scale;
  return out;
}

// flip[t] = x[(-t) mod n] on both axes; the adjoint kernel of circular conv.
inline Tensor circular_flip(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape);
  const std::size_t rows = x.shape[0], cols = x.shape[1];
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      out.re[((rows - r) % rows) * cols + ((cols - c) % cols)] = x.re[r * cols + c];
  return out;
}

}  // namespace lensveil::fft
