#pragma once

// Reconstruction and distinction losses. Norms are root-mean-square: over all
// elements for the reconstruction loss, over mask-supported elements for P
// and N, so the loss scale does not depend on resolution or mask area.

#include <cmath>
#include <optional>
#include <span>

#include "ddl/tensor.hpp"

namespace ddl {

struct LossConfig {
  double lambda = 1.0;
  double epsilon = 1e-6;

  void validate() const {
    expects(std::isfinite(lambda) && lambda >= 0.0, "loss lambda must be >= 0");
    expects(std::isfinite(epsilon) && epsilon > 0.0, "loss epsilon must be > 0");
  }
};

struct DistinctionTerms {
  double p = 0.0;
  double n = 0.0;
  double dist = 1.0;
  std::size_t support = 0;
};

struct LossBreakdown {
  double recon = 0.0;
  std::optional<double> p, n, dist;  // absent without the distinction branch
  double total = 0.0;
};

template <typename S>
double recon_loss(std::span<const S> x_t, std::span<const S> f_x) {
  if (x_t.size() != f_x.size() || x_t.empty()) throw ContractError("recon_loss: shape mismatch");
  double ss = 0.0;
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    const double d = static_cast<double>(x_t[i]) - static_cast<double>(f_x[i]);
    ss += d * d;
  }
  return std::sqrt(ss / static_cast<double>(x_t.size()));
}

template <typename S>
double recon_loss(const Tensor<S>& x_t, const Tensor<S>& f_x) {
  expect_same_shape(x_t, f_x, "recon_loss");
  return recon_loss<S>(x_t.values(), f_x.values());
}

// Adds scale * d(recon)/d(f_x) into d_f. Zero at recon == 0 (subgradient).
template <typename S>
void recon_loss_backward(std::span<const S> x_t, std::span<const S> f_x, double value, double scale,
                         std::span<S> d_f) {
  if (value <= 0.0) return;
  const double k = scale / (static_cast<double>(x_t.size()) * value);
  for (std::size_t i = 0; i < x_t.size(); ++i)
    d_f[i] += static_cast<S>(-k * (static_cast<double>(x_t[i]) - static_cast<double>(f_x[i])));
}

// P = rms_M(X^t - f(X_A)), N = rms_M(X_A^t - f(X_A)), dist = (P + eps) / (N + eps).
template <typename S>
DistinctionTerms distinction_loss(std::span<const S> x_t, std::span<const S> xa_t, std::span<const S> f_xa,
                                  std::span<const S> mask, double eps) {
  const std::size_t n = x_t.size();
  if (xa_t.size() != n || f_xa.size() != n || mask.size() != n)
    throw ContractError("distinction_loss: shape mismatch");
  expects(eps > 0.0, "distinction_loss: eps must be > 0");
  DistinctionTerms t;
  double sp = 0.0, sn = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask[i] == S(0)) continue;
    if (mask[i] != S(1)) throw ContractError("distinction_loss: mask is not binary");
    ++t.support;
    const double f = f_xa[i];
    sp += (x_t[i] - f) * (x_t[i] - f);
    sn += (xa_t[i] - f) * (xa_t[i] - f);
  }
  if (t.support > 0) {
    t.p = std::sqrt(sp / static_cast<double>(t.support));
    t.n = std::sqrt(sn / static_cast<double>(t.support));
  }
  t.dist = (t.p + eps) / (t.n + eps);
  return t;
}

template <typename S>
DistinctionTerms distinction_loss(const Tensor<S>& x_t, const Tensor<S>& xa_t, const Tensor<S>& f_xa,
                                  const Tensor<S>& mask, double eps) {
  expect_same_shape(x_t, xa_t, "distinction_loss");
  expect_same_shape(x_t, f_xa, "distinction_loss");
  expect_same_shape(x_t, mask, "distinction_loss");
  return distinction_loss<S>(x_t.values(), xa_t.values(), f_xa.values(), mask.values(), eps);
}

// Adds scale * d(dist)/d(f_xa) into d_f and scale * d(dist)/d(xa_t) into d_xa.
template <typename S>
void distinction_loss_backward(std::span<const S> x_t, std::span<const S> xa_t, std::span<const S> f_xa,
                               std::span<const S> mask, const DistinctionTerms& t, double eps, double scale,
                               std::span<S> d_f, std::span<S> d_xa) {
  if (t.support == 0) return;
  const double dd_dp = 1.0 / (t.n + eps);
  const double dd_dn = -(t.p + eps) / ((t.n + eps) * (t.n + eps));
  const double m = static_cast<double>(t.support);
  const double kp = t.p > 0.0 ? scale * dd_dp / (m * t.p) : 0.0;
  const double kn = t.n > 0.0 ? scale * dd_dn / (m * t.n) : 0.0;
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    if (mask[i] == S(0)) continue;
    const double f = f_xa[i];
    const double rp = x_t[i] - f, rn = xa_t[i] - f;
    d_f[i] += static_cast<S>(-kp * rp - kn * rn);
    if (!d_xa.empty()) d_xa[i] += static_cast<S>(kn * rn);
  }
}

// L = L_recon + lambda * L_dist; without distinction terms L = L_recon.
inline LossBreakdown total_loss(double recon, const std::optional<DistinctionTerms>& dist, const LossConfig& cfg) {
  LossBreakdown b;
  b.recon = recon;
  b.total = recon;
  if (dist) {
    b.p = dist->p;
    b.n = dist->n;
    b.dist = dist->dist;
    b.total += cfg.lambda * dist->dist;
  }
  return b;
}

}  // namespace ddl
