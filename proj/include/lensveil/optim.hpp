#pragma once

#include <cmath>

#include "lensveil/tensor.hpp"

namespace lensveil::opt {

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Tensor m;
  Tensor v;
  long step = 0;
};

struct AdadeltaConfig {
  double lr = 1.0;
  double rho = 0.9;
  double eps = 1e-6;
};

struct AdadeltaState {
  Tensor accum_grad2;
  Tensor accum_dx2;
};

inline bool has_nan(const Tensor& g) {
  for (double v : g.re)
    if (std::isnan(v)) return true;
  return false;
}

// Returns false (and leaves params untouched) when the gradient carries NaN.
inline bool adam_step(Tensor& params, const Tensor& grad, AdamState& st, const AdamConfig& cfg) {
  require(params.same_shape(grad), "adam: shape mismatch");
  if (has_nan(grad)) return false;
  if (st.m.re.empty()) {
    st.m = Tensor::zeros(params.shape);
    st.v = Tensor::zeros(params.shape);
  }
  st.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.re.size(); ++i) {
    st.m.re[i] = cfg.beta1 * st.m.re[i] + (1.0 - cfg.beta1) * grad.re[i];
    st.v.re[i] = cfg.beta2 * st.v.re[i] + (1.0 - cfg.beta2) * grad.re[i] * grad.re[i];
    const double mhat = st.m.re[i] / bc1;
    const double vhat = st.v.re[i] / bc2;
    params.re[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
  return true;
}

inline bool adadelta_step(Tensor& params, const Tensor& grad, AdadeltaState& st,
                          const AdadeltaConfig& cfg) {
  require(params.same_shape(grad), "adadelta: shape mismatch");
  if (has_nan(grad)) return false;
  if (st.accum_grad2.re.empty()) {
    st.accum_grad2 = Tensor::zeros(params.shape);
    st.accum_dx2 = Tensor::zeros(params.shape);
  }
  for (std::size_t i = 0; i < params.re.size(); ++i) {
    const double g = grad.re[i];
    st.accum_grad2.re[i] = cfg.rho * st.accum_grad2.re[i] + (1.0 - cfg.rho) * g * g;
    const double dx = -std::sqrt((st.accum_dx2.re[i] + cfg.eps) /
                                 (st.accum_grad2.re[i] + cfg.eps)) *
                      g;
    st.accum_dx2.re[i] = cfg.rho * st.accum_dx2.re[i] + (1.0 - cfg.rho) * dx * dx;
    params.re[i] += cfg.lr * dx;
  }
  return true;
}

}  // namespace lensveil::opt
