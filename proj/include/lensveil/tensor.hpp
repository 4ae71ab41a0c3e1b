#pragma once

#include <complex>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "lensveil/common.hpp"

namespace lensveil {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

// Dense row-major tensor of doubles. Complex tensors carry a second plane
// (im); a real tensor has im empty. Rank is unconstrained but the ops that
// consume tensors enforce their own rank requirements.
class Tensor {
 public:
  Shape shape;
  std::vector<double> re;
  std::vector<double> im;

  Tensor() = default;

  static Tensor zeros(Shape s) {
    Tensor t;
    t.shape = std::move(s);
    t.re.assign(numel_of(t.shape), 0.0);
    return t;
  }

  static Tensor zeros_complex(Shape s) {
    Tensor t = zeros(std::move(s));
    t.im.assign(t.re.size(), 0.0);
    return t;
  }

  static Tensor full(Shape s, double v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.re.begin(), t.re.end(), v);
    return t;
  }

  static Tensor scalar(double v) { return full({1}, v); }

  static Tensor from(Shape s, std::vector<double> data) {
    Tensor t;
    t.shape = std::move(s);
    require(numel_of(t.shape) == data.size(), "tensor data does not match shape");
    t.re = std::move(data);
    return t;
  }

  bool is_complex() const { return !im.empty(); }
  std::size_t size() const { return re.size(); }
  bool is_scalar() const { return re.size() == 1; }

  double& at(std::size_t r, std::size_t c) { return re[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return re[r * shape[1] + c]; }

  double item() const {
    require(is_scalar(), "item() on non-scalar tensor");
    return re[0];
  }

  std::complex<double> citem(std::size_t i) const {
    return {re[i], is_complex() ? im[i] : 0.0};
  }

  Tensor& promote_complex() {
    if (!is_complex()) im.assign(re.size(), 0.0);
    return *this;
  }

  double sum() const { return std::accumulate(re.begin(), re.end(), 0.0); }

  bool all_finite() const {
    for (double v : re)
      if (!std::isfinite(v)) return false;
    for (double v : im)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape == b.shape && a.re == b.re && a.im == b.im;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.re.size(); ++i) m = std::max(m, std::abs(a.re[i] - b.re[i]));
  const std::size_t ni = std::min(a.im.size(), b.im.size());
  for (std::size_t i = 0; i < ni; ++i) m = std::max(m, std::abs(a.im[i] - b.im[i]));
  return m;
}

inline double l1_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.re.size(); ++i) s += std::abs(a.re[i] - b.re[i]);
  return s;
}

}  // namespace lensveil
