#pragma once

// Pseudo-anomaly creation: a noise tensor blended into the clip with a learned
// anomaly weight, then overlaid on the clip only inside the object mask.

#include <algorithm>
#include <cmath>
#include <limits>

#include "ddl/rng.hpp"
#include "ddl/tensor.hpp"

namespace ddl {

// Logistic function kept strictly inside (0, 1) even where double rounding
// would otherwise saturate.
inline double sigmoid_weight(double ell) {
  if (!std::isfinite(ell)) throw ContractError("sigmoid_weight: non-finite anomaly logit");
  double v;
  if (ell >= 0.0) {
    v = 1.0 / (1.0 + std::exp(-ell));
  } else {
    const double e = std::exp(ell);
    v = e / (1.0 + e);
  }
  return std::clamp(v, std::numeric_limits<double>::denorm_min(), std::nextafter(1.0, 0.0));
}

// The trainable scalar behind the anomaly weight. Frozen weights (static
// distinction learning) ignore updates.
class AnomalyWeight {
 public:
  AnomalyWeight() = default;
  explicit AnomalyWeight(double ell, bool trainable = true) : ell_(ell), trainable_(trainable) {
    expects(std::isfinite(ell), "anomaly logit must be finite");
  }

  double ell() const noexcept { return ell_; }
  bool trainable() const noexcept { return trainable_; }
  double value() const { return sigmoid_weight(ell_); }
  // d sigma / d ell
  double slope() const {
    const double s = value();
    return s * (1.0 - s);
  }

  void set_ell(double ell) {
    expects(std::isfinite(ell), "anomaly logit must be finite");
    if (trainable_) ell_ = ell;
  }

 private:
  double ell_ = 0.0;
  bool trainable_ = true;
};

// i.i.d. Uniform[0, 1) noise.
template <typename S>
Tensor<S> sample_noise(const Shape& shape, Rng& rng) {
  for (auto d : shape) expects(d > 0, "sample_noise: dimensions must be positive");
  Tensor<S> a(shape);
  for (auto& v : a.values()) v = static_cast<S>(rng.uniform());
  return a;
}

// (1 - w) * X + w * A
template <typename S>
Tensor<S> blend_noise(const Tensor<S>& x, const Tensor<S>& noise, double w) {
  expect_same_shape(x, noise, "blend_noise");
  Tensor<S> out(x.shape());
  const S ws = static_cast<S>(w), keep = static_cast<S>(1.0 - w);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = keep * x[i] + ws * noise[i];
  return out;
}

template <typename S>
void expect_binary(const Tensor<S>& m, const char* what) {
  for (auto v : m.values())
    if (v != S(0) && v != S(1)) throw ContractError(std::string(what) + ": mask is not binary");
}

// (1 - M) * X + M * X_blended
template <typename S>
Tensor<S> compose_pseudo(const Tensor<S>& x, const Tensor<S>& blended, const Tensor<S>& mask) {
  expect_same_shape(x, blended, "compose_pseudo");
  expect_same_shape(x, mask, "compose_pseudo");
  expect_binary(mask, "compose_pseudo");
  Tensor<S> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = mask[i] != S(0) ? blended[i] : x[i];
  return out;
}

// Chain rule from dL/dX_A to dL/dw: dX_A/dw = M * (A - X).
template <typename S>
double weight_gradient(const Tensor<S>& d_pseudo, const Tensor<S>& x, const Tensor<S>& noise, const Tensor<S>& mask) {
  expect_same_shape(d_pseudo, x, "weight_gradient");
  double g = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (mask[i] != S(0)) g += static_cast<double>(d_pseudo[i]) * (static_cast<double>(noise[i]) - x[i]);
  return g;
}

}  // namespace ddl
