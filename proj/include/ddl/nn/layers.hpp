#pragma once

// Layer primitives with hand-written backward passes.
//
// Feature maps use a channel-major layout (C, N, H, W): every channel holds the
// whole batch contiguously, so a 3x3 convolution is a single GEMM of the
// (Cout, Cin*9) weight matrix against an im2col buffer of shape (Cin*9, N*H*W),
// and batch normalization reduces over one contiguous run per channel.

#include <Eigen/Core>
#include <cmath>
#include <string>
#include <vector>

#include "ddl/rng.hpp"
#include "ddl/tensor.hpp"

namespace ddl::nn {

enum class Mode { kTrain, kEval };

template <typename S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;

  Param() = default;
  Param(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}
};

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMatrix<S>>;

inline constexpr std::size_t kKernel = 3;
inline constexpr std::size_t kTaps = kKernel * kKernel;

// (C, N, H, W) -> (C*9, N*H*W) for a 3x3 "same" convolution with zero padding.
template <typename S>
std::vector<S> im2col(const Tensor<S>& x) {
  const std::size_t C = x.dim(0), N = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t P = N * H * W;
  std::vector<S> col(C * kTaps * P, S(0));
  for (std::size_t c = 0; c < C; ++c) {
    const S* src = x.data() + c * P;
    for (std::size_t ky = 0; ky < kKernel; ++ky) {
      for (std::size_t kx = 0; kx < kKernel; ++kx) {
        S* dst = col.data() + ((c * kTaps) + ky * kKernel + kx) * P;
        const long dy = static_cast<long>(ky) - 1, dx = static_cast<long>(kx) - 1;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t y = 0; y < H; ++y) {
            const long sy = static_cast<long>(y) + dy;
            if (sy < 0 || sy >= static_cast<long>(H)) continue;
            const S* srow = src + (n * H + static_cast<std::size_t>(sy)) * W;
            S* drow = dst + (n * H + y) * W;
            const std::size_t x0 = dx < 0 ? 1 : 0;
            const std::size_t x1 = dx > 0 ? W - 1 : W;
            for (std::size_t xx = x0; xx < x1; ++xx) drow[xx] = srow[static_cast<long>(xx) + dx];
          }
        }
      }
    }
  }
  return col;
}

// Adjoint of im2col: scatter-add columns back into a (C, N, H, W) gradient.
template <typename S>
Tensor<S> col2im(const std::vector<S>& col, const Shape& shape) {
  const std::size_t C = shape[0], N = shape[1], H = shape[2], W = shape[3];
  const std::size_t P = N * H * W;
  Tensor<S> dx(shape);
  for (std::size_t c = 0; c < C; ++c) {
    S* dst = dx.data() + c * P;
    for (std::size_t ky = 0; ky < kKernel; ++ky) {
      for (std::size_t kx = 0; kx < kKernel; ++kx) {
        const S* src = col.data() + ((c * kTaps) + ky * kKernel + kx) * P;
        const long dy = static_cast<long>(ky) - 1, dxo = static_cast<long>(kx) - 1;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t y = 0; y < H; ++y) {
            const long sy = static_cast<long>(y) + dy;
            if (sy < 0 || sy >= static_cast<long>(H)) continue;
            S* drow = dst + (n * H + static_cast<std::size_t>(sy)) * W;
            const S* srow = src + (n * H + y) * W;
            const std::size_t x0 = dxo < 0 ? 1 : 0;
            const std::size_t x1 = dxo > 0 ? W - 1 : W;
            for (std::size_t xx = x0; xx < x1; ++xx) drow[static_cast<long>(xx) + dxo] += srow[xx];
          }
        }
      }
    }
  }
  return dx;
}

// 3x3 stride-1 "same" convolution. Weight layout (Cout, Cin, 3, 3).
template <typename S>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(const std::string& name, std::size_t in_channels, std::size_t out_channels)
      : weight_(name + ".weight", {out_channels, in_channels, kKernel, kKernel}),
        bias_(name + ".bias", {out_channels}) {}

  std::size_t in_channels() const { return weight_.value.dim(1); }
  std::size_t out_channels() const { return weight_.value.dim(0); }

  // Writes this convolution's response into channels [offset, offset+Cout) of `out`.
  void apply(const std::vector<S>& col, Tensor<S>& out, std::size_t offset) const {
    const std::size_t P = out.dim(1) * out.dim(2) * out.dim(3);
    const std::size_t K = in_channels() * kTaps;
    ConstMatMap<S> w(weight_.value.data(), out_channels(), K);
    ConstMatMap<S> c(col.data(), K, P);
    MatMap<S> y(out.data() + offset * P, out_channels(), P);
    y.noalias() = w * c;
    for (std::size_t o = 0; o < out_channels(); ++o) y.row(o).array() += bias_.value[o];
  }

  // Accumulates parameter gradients and adds this convolution's share to dcol.
  void accumulate(const std::vector<S>& col, const Tensor<S>& dy, std::size_t offset, std::vector<S>& dcol,
                  bool overwrite = false) {
    const std::size_t P = dy.dim(1) * dy.dim(2) * dy.dim(3);
    const std::size_t K = in_channels() * kTaps;
    ConstMatMap<S> g(dy.data() + offset * P, out_channels(), P);
    ConstMatMap<S> c(col.data(), K, P);
    MatMap<S> dw(weight_.grad.data(), out_channels(), K);
    dw.noalias() += g * c.transpose();
    for (std::size_t o = 0; o < out_channels(); ++o) bias_.grad[o] += g.row(o).sum();
    ConstMatMap<S> w(weight_.value.data(), out_channels(), K);
    MatMap<S> dc(dcol.data(), K, P);
    if (overwrite) dc.noalias() = w.transpose() * g;
    else dc.noalias() += w.transpose() * g;
  }

  ConstMatMap<S> weight_matrix() const { return {weight_.value.data(), static_cast<long>(out_channels()), static_cast<long>(in_channels() * kTaps)}; }
  const Tensor<S>& bias() const { return bias_.value; }

  template <typename DW, typename G>
  void add_grad(const DW& dw, const G& g) {
    MatMap<S>(weight_.grad.data(), out_channels(), in_channels() * kTaps) += dw;
    for (std::size_t o = 0; o < out_channels(); ++o) bias_.grad[o] += g.row(o).sum();
  }

  Tensor<S> forward(const Tensor<S>& x) const {
    check_input(x);
    Tensor<S> out({out_channels(), x.dim(1), x.dim(2), x.dim(3)});
    apply(im2col(x), out, 0);
    return out;
  }

  Tensor<S> backward(const Tensor<S>& x, const Tensor<S>& dy) {
    const auto col = im2col(x);
    std::vector<S> dcol(col.size());
    accumulate(col, dy, 0, dcol, true);
    return col2im(dcol, x.shape());
  }

  void init(Rng& rng) {
    const double fan_in = static_cast<double>(in_channels() * kTaps);
    const double wb = std::sqrt(6.0 / fan_in);
    const double bb = 1.0 / std::sqrt(fan_in);
    for (auto& v : weight_.value.values()) v = static_cast<S>(rng.uniform(-wb, wb));
    for (auto& v : bias_.value.values()) v = static_cast<S>(rng.uniform(-bb, bb));
  }

  template <typename F>
  void visit(F&& fn) {
    fn(weight_);
    fn(bias_);
  }
  template <typename F>
  void visit(F&& fn) const {
    fn(weight_);
    fn(bias_);
  }

  void check_input(const Tensor<S>& x) const {
    if (x.rank() != 4 || x.dim(0) != in_channels())
      throw ContractError("conv " + weight_.name + ": expected " + std::to_string(in_channels()) +
                          " input channels, got " + shape_str(x.shape()));
  }

 private:
  Param<S> weight_;
  Param<S> bias_;
};

// Four parallel 3x3 convolutions over a shared im2col buffer; outputs are
// concatenated along channels.
template <typename S>
class MultiHeadConv {
 public:
  static constexpr std::size_t kHeads = 4;

  MultiHeadConv() = default;
  MultiHeadConv(const std::string& name, std::size_t in_channels, std::size_t out_channels) {
    expects(out_channels % kHeads == 0 && out_channels > 0,
            "multi-head conv output channels must be a positive multiple of 4");
    for (std::size_t h = 0; h < kHeads; ++h)
      heads_.emplace_back(name + ".head" + std::to_string(h), in_channels, out_channels / kHeads);
  }

  std::size_t in_channels() const { return heads_.front().in_channels(); }
  std::size_t out_channels() const { return heads_.front().out_channels() * kHeads; }

  Tensor<S> forward(const Tensor<S>& x) const {
    heads_.front().check_input(x);
    const auto col = im2col(x);
    const std::size_t P = x.dim(1) * x.dim(2) * x.dim(3), K = in_channels() * kTaps, O = out_channels();
    const RowMatrix<S> w = stacked_weights();
    Tensor<S> out({O, x.dim(1), x.dim(2), x.dim(3)});
    MatMap<S> y(out.data(), O, P);
    y.noalias() = w * ConstMatMap<S>(col.data(), K, P);
    const std::size_t per = heads_.front().out_channels();
    for (std::size_t h = 0; h < kHeads; ++h)
      for (std::size_t o = 0; o < per; ++o) y.row(h * per + o).array() += heads_[h].bias()[o];
    return out;
  }

  Tensor<S> backward(const Tensor<S>& x, const Tensor<S>& dy) {
    const auto col = im2col(x);
    const std::size_t P = x.dim(1) * x.dim(2) * x.dim(3), K = in_channels() * kTaps, O = out_channels();
    const std::size_t per = heads_.front().out_channels();
    ConstMatMap<S> g(dy.data(), O, P);
    ConstMatMap<S> c(col.data(), K, P);
    const RowMatrix<S> dw = g * c.transpose();
    for (std::size_t h = 0; h < kHeads; ++h) heads_[h].add_grad(dw.middleRows(h * per, per), g.middleRows(h * per, per));
    std::vector<S> dcol(col.size());
    MatMap<S>(dcol.data(), K, P).noalias() = stacked_weights().transpose() * g;
    return col2im(dcol, x.shape());
  }

  void init(Rng& rng) {
    for (auto& h : heads_) h.init(rng);
  }

  RowMatrix<S> stacked_weights() const {
    const std::size_t per = heads_.front().out_channels(), K = in_channels() * kTaps;
    RowMatrix<S> w(out_channels(), K);
    for (std::size_t h = 0; h < kHeads; ++h) w.middleRows(h * per, per) = heads_[h].weight_matrix();
    return w;
  }

  template <typename F>
  void visit(F&& fn) {
    for (auto& h : heads_) h.visit(fn);
  }
  template <typename F>
  void visit(F&& fn) const {
    for (const auto& h : heads_) h.visit(fn);
  }

 private:
  std::vector<Conv2d<S>> heads_;
};

template <typename S>
struct BatchNormCache {
  Tensor<S> xhat;
  std::vector<double> mean, var, inv_std;
};

// Per-channel batch normalization over (N, H, W). Training mode uses batch
// statistics; evaluation mode uses the running averages.
template <typename S>
class BatchNorm2d {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, std::size_t channels)
      : gamma_(name + ".gamma", {channels}),
        beta_(name + ".beta", {channels}),
        running_mean_name_(name + ".running_mean"),
        running_var_name_(name + ".running_var"),
        running_mean_({channels}, S(0)),
        running_var_({channels}, S(1)) {
    gamma_.value.fill(S(1));
  }

  std::size_t channels() const { return gamma_.value.size(); }

  Tensor<S> forward(const Tensor<S>& x, Mode mode, BatchNormCache<S>* cache) const {
    expects(x.rank() == 4 && x.dim(0) == channels(), "batch norm " + gamma_.name + ": channel mismatch");
    const std::size_t C = channels();
    const std::size_t M = x.size() / C;
    Tensor<S> y(x.shape());
    BatchNormCache<S> local;
    BatchNormCache<S>& c = cache ? *cache : local;
    c.mean.assign(C, 0.0);
    c.var.assign(C, 0.0);
    c.inv_std.assign(C, 0.0);
    if (cache) c.xhat = Tensor<S>(x.shape());
    for (std::size_t ch = 0; ch < C; ++ch) {
      const S* in = x.data() + ch * M;
      double mean, var;
      if (mode == Mode::kTrain) {
        double s = 0.0;
        for (std::size_t i = 0; i < M; ++i) s += in[i];
        mean = s / static_cast<double>(M);
        double ss = 0.0;
        for (std::size_t i = 0; i < M; ++i) ss += (in[i] - mean) * (in[i] - mean);
        var = ss / static_cast<double>(M);
      } else {
        mean = running_mean_[ch];
        var = running_var_[ch];
      }
      const double inv = 1.0 / std::sqrt(var + kEps);
      c.mean[ch] = mean;
      c.var[ch] = var;
      c.inv_std[ch] = inv;
      const S g = gamma_.value[ch], b = beta_.value[ch];
      S* out = y.data() + ch * M;
      for (std::size_t i = 0; i < M; ++i) {
        const S xh = static_cast<S>((in[i] - mean) * inv);
        if (cache) c.xhat[ch * M + i] = xh;
        out[i] = g * xh + b;
      }
    }
    return y;
  }

  void update_running(const BatchNormCache<S>& c, std::size_t count) {
    const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
    for (std::size_t ch = 0; ch < channels(); ++ch) {
      running_mean_[ch] = static_cast<S>((1.0 - kMomentum) * running_mean_[ch] + kMomentum * c.mean[ch]);
      running_var_[ch] = static_cast<S>((1.0 - kMomentum) * running_var_[ch] + kMomentum * c.var[ch] * unbias);
    }
  }

  Tensor<S> backward(const BatchNormCache<S>& c, const Tensor<S>& dy) {
    const std::size_t C = channels();
    const std::size_t M = dy.size() / C;
    Tensor<S> dx(dy.shape());
    for (std::size_t ch = 0; ch < C; ++ch) {
      const S* g = dy.data() + ch * M;
      const S* xh = c.xhat.data() + ch * M;
      double sum_g = 0.0, sum_gx = 0.0;
      for (std::size_t i = 0; i < M; ++i) {
        sum_g += g[i];
        sum_gx += static_cast<double>(g[i]) * xh[i];
      }
      gamma_.grad[ch] += static_cast<S>(sum_gx);
      beta_.grad[ch] += static_cast<S>(sum_g);
      const double gam = gamma_.value[ch];
      const double scale = gam * c.inv_std[ch] / static_cast<double>(M);
      const double mg = sum_g, mgx = sum_gx;
      S* out = dx.data() + ch * M;
      for (std::size_t i = 0; i < M; ++i)
        out[i] = static_cast<S>(scale * (static_cast<double>(M) * g[i] - mg - xh[i] * mgx));
    }
    return dx;
  }

  template <typename F>
  void visit(F&& fn) {
    fn(gamma_);
    fn(beta_);
  }
  template <typename F>
  void visit(F&& fn) const {
    fn(gamma_);
    fn(beta_);
  }
  template <typename F>
  void visit_buffers(F&& fn) {
    fn(running_mean_name_, running_mean_);
    fn(running_var_name_, running_var_);
  }
  template <typename F>
  void visit_buffers(F&& fn) const {
    fn(running_mean_name_, running_mean_);
    fn(running_var_name_, running_var_);
  }

 private:
  Param<S> gamma_;
  Param<S> beta_;
  std::string running_mean_name_, running_var_name_;
  Tensor<S> running_mean_;
  Tensor<S> running_var_;
};

template <typename S>
void relu_inplace(Tensor<S>& x) {
  for (auto& v : x.values()) v = v > S(0) ? v : S(0);
}

// Masks dy by the activation pattern of a ReLU output.
template <typename S>
Tensor<S> relu_backward(const Tensor<S>& out, Tensor<S> dy) {
  for (std::size_t i = 0; i < dy.size(); ++i)
    if (!(out[i] > S(0))) dy[i] = S(0);
  return dy;
}

// (C, N, H, W) -> (4C, N, H/2, W/2); 2x2 blocks fold into channels c*4 + dy*2 + dx.
template <typename S>
Tensor<S> space_to_depth(const Tensor<S>& x) {
  const std::size_t C = x.dim(0), N = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (H % 2 || W % 2) throw ContractError("space_to_depth: odd spatial size " + shape_str(x.shape()));
  const std::size_t h = H / 2, w = W / 2;
  Tensor<S> out({C * 4, N, h, w});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t dy = k / 2, dx = k % 2;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t y = 0; y < h; ++y) {
          const S* src = x.data() + ((c * N + n) * H + 2 * y + dy) * W + dx;
          S* dst = out.data() + (((c * 4 + k) * N + n) * h + y) * w;
          for (std::size_t xx = 0; xx < w; ++xx) dst[xx] = src[2 * xx];
        }
    }
  return out;
}

// Inverse of space_to_depth: (C, N, H, W) -> (C/4, N, 2H, 2W).
template <typename S>
Tensor<S> depth_to_space(const Tensor<S>& x) {
  const std::size_t C = x.dim(0), N = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (C % 4) throw ContractError("depth_to_space: channels not divisible by 4 " + shape_str(x.shape()));
  const std::size_t Co = C / 4, H = 2 * h, W = 2 * w;
  Tensor<S> out({Co, N, H, W});
  for (std::size_t c = 0; c < Co; ++c)
    for (std::size_t k = 0; k < 4; ++k) {
      const std::size_t dy = k / 2, dx = k % 2;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t y = 0; y < h; ++y) {
          const S* src = x.data() + (((c * 4 + k) * N + n) * h + y) * w;
          S* dst = out.data() + ((c * N + n) * H + 2 * y + dy) * W + dx;
          for (std::size_t xx = 0; xx < w; ++xx) dst[2 * xx] = src[xx];
        }
    }
  return out;
}

template <typename S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ContractError("concat: spatial mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> data;
  data.reserve(a.size() + b.size());
  data.insert(data.end(), a.values().begin(), a.values().end());
  data.insert(data.end(), b.values().begin(), b.values().end());
  return Tensor<S>({a.dim(0) + b.dim(0), a.dim(1), a.dim(2), a.dim(3)}, std::move(data));
}

template <typename S>
std::pair<Tensor<S>, Tensor<S>> split_channels(const Tensor<S>& x, std::size_t first) {
  const std::size_t per = x.size() / x.dim(0);
  Tensor<S> a({first, x.dim(1), x.dim(2), x.dim(3)});
  Tensor<S> b({x.dim(0) - first, x.dim(1), x.dim(2), x.dim(3)});
  std::copy(x.data(), x.data() + first * per, a.data());
  std::copy(x.data() + first * per, x.data() + x.size(), b.data());
  return {std::move(a), std::move(b)};
}

}  // namespace ddl::nn
