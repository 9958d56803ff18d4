#pragma once

// Reconstruction network: a per-frame 2D UNet whose skip connections pass
// through temporal convolutions that collapse a T-frame window onto the
// middle frame. The UNET_BASELINE variant drops the temporal convolutions and
// reconstructs a single frame.
//
// Public tensors use the clip layout (B, c, T, H, W); internally frames are
// folded into the batch axis in the channel-major layout (C, B*T, H, W)
// described in nn/layers.hpp.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ddl/nn/layers.hpp"

namespace ddl {

enum class ModelVariant { kC3DSU, kUNetBaseline };

inline std::string to_string(ModelVariant v) { return v == ModelVariant::kC3DSU ? "C3DSU" : "UNET_BASELINE"; }

struct ModelConfig {
  ModelVariant variant = ModelVariant::kC3DSU;
  std::size_t in_channels = 1;
  std::size_t frames = 3;  // T; always 1 for the baseline
  std::size_t base_channels = 32;
  std::size_t depth = 4;
  std::uint64_t seed = 7;

  std::size_t channels_at(std::size_t level) const { return base_channels << level; }
  std::size_t spatial_divisor() const { return std::size_t{1} << depth; }

  void validate() const {
    expects(depth >= 1, "model depth must be >= 1");
    expects(in_channels >= 1, "model in_channels must be >= 1");
    expects(base_channels >= 4 && base_channels % 4 == 0, "base_channels must be a positive multiple of 4");
    expects(frames % 2 == 1, "frame count T must be odd");
    expects(variant == ModelVariant::kC3DSU || frames == 1, "UNET_BASELINE processes single frames (T = 1)");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

namespace nn {

template <typename S>
struct EncoderCache {
  Tensor<S> x, r1, s, r2;
  BatchNormCache<S> bn1, bn2;
};

// heads (4 x 3x3, concat) -> BN -> ReLU -> space-to-depth -> 3x3 conv -> BN -> ReLU
template <typename S>
class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(const std::string& name, std::size_t in, std::size_t out)
      : heads_(name + ".heads", in, out),
        bn1_(name + ".bn1", out),
        reduce_(name + ".reduce", 4 * out, out),
        bn2_(name + ".bn2", out) {}

  std::size_t out_channels() const { return reduce_.out_channels(); }

  Tensor<S> forward(const Tensor<S>& x, Mode mode, EncoderCache<S>* c) const {
    if (x.dim(2) % 2 || x.dim(3) % 2)
      throw ContractError("encoder block: odd spatial size " + shape_str(x.shape()));
    BatchNormCache<S>* bc1 = c ? &c->bn1 : nullptr;
    BatchNormCache<S>* bc2 = c ? &c->bn2 : nullptr;
    Tensor<S> r1 = bn1_.forward(heads_.forward(x), mode, bc1);
    relu_inplace(r1);
    Tensor<S> s = space_to_depth(r1);
    Tensor<S> r2 = bn2_.forward(reduce_.forward(s), mode, bc2);
    relu_inplace(r2);
    if (c) {
      c->x = x;
      c->r1 = std::move(r1);
      c->s = std::move(s);
      c->r2 = r2;
    }
    return r2;
  }

  Tensor<S> backward(const EncoderCache<S>& c, const Tensor<S>& dy) {
    Tensor<S> g = bn2_.backward(c.bn2, relu_backward(c.r2, dy));
    g = depth_to_space(reduce_.backward(c.s, g));
    g = bn1_.backward(c.bn1, relu_backward(c.r1, std::move(g)));
    return heads_.backward(c.x, g);
  }

  void update_running(const EncoderCache<S>& c) {
    bn1_.update_running(c.bn1, c.r1.size() / c.r1.dim(0));
    bn2_.update_running(c.bn2, c.r2.size() / c.r2.dim(0));
  }

  void init(Rng& rng) {
    heads_.init(rng);
    reduce_.init(rng);
  }

  template <typename F>
  void visit(F&& fn) {
    heads_.visit(fn);
    bn1_.visit(fn);
    reduce_.visit(fn);
    bn2_.visit(fn);
  }
  template <typename F>
  void visit_buffers(F&& fn) {
    bn1_.visit_buffers(fn);
    bn2_.visit_buffers(fn);
  }

 private:
  MultiHeadConv<S> heads_;
  BatchNorm2d<S> bn1_;
  Conv2d<S> reduce_;
  BatchNorm2d<S> bn2_;
};

template <typename S>
struct DecoderCache {
  std::size_t up_channels = 0;
  Tensor<S> z, r1, r2;
  BatchNormCache<S> bn1, bn2;
};

// depth-to-space -> concat(skip) -> heads -> BN -> ReLU -> 3x3 conv -> BN -> ReLU
template <typename S>
class DecoderBlock {
 public:
  DecoderBlock() = default;
  DecoderBlock(const std::string& name, std::size_t in, std::size_t skip, std::size_t out)
      : heads_(name + ".heads", in / 4 + skip, out),
        bn1_(name + ".bn1", out),
        conv_(name + ".conv", out, out),
        bn2_(name + ".bn2", out) {
    expects(in % 4 == 0, "decoder input channels must be divisible by 4");
  }

  Tensor<S> forward(const Tensor<S>& x, const Tensor<S>& skip, Mode mode, DecoderCache<S>* c) const {
    Tensor<S> up = depth_to_space(x);
    if (up.dim(1) != skip.dim(1) || up.dim(2) != skip.dim(2) || up.dim(3) != skip.dim(3))
      throw ContractError("decoder block: upsampled " + shape_str(up.shape()) + " does not match skip " +
                          shape_str(skip.shape()));
    const std::size_t up_channels = up.dim(0);
    Tensor<S> z = concat_channels(up, skip);
    Tensor<S> r1 = bn1_.forward(heads_.forward(z), mode, c ? &c->bn1 : nullptr);
    relu_inplace(r1);
    Tensor<S> r2 = bn2_.forward(conv_.forward(r1), mode, c ? &c->bn2 : nullptr);
    relu_inplace(r2);
    if (c) {
      c->up_channels = up_channels;
      c->z = std::move(z);
      c->r1 = std::move(r1);
      c->r2 = r2;
    }
    return r2;
  }

  // Returns (d input, d skip).
  std::pair<Tensor<S>, Tensor<S>> backward(const DecoderCache<S>& c, const Tensor<S>& dy) {
    Tensor<S> g = bn2_.backward(c.bn2, relu_backward(c.r2, dy));
    g = conv_.backward(c.r1, g);
    g = bn1_.backward(c.bn1, relu_backward(c.r1, std::move(g)));
    g = heads_.backward(c.z, g);
    auto [dup, dskip] = split_channels(g, c.up_channels);
    return {space_to_depth(dup), std::move(dskip)};
  }

  void update_running(const DecoderCache<S>& c) {
    bn1_.update_running(c.bn1, c.r1.size() / c.r1.dim(0));
    bn2_.update_running(c.bn2, c.r2.size() / c.r2.dim(0));
  }

  void init(Rng& rng) {
    heads_.init(rng);
    conv_.init(rng);
  }

  template <typename F>
  void visit(F&& fn) {
    heads_.visit(fn);
    bn1_.visit(fn);
    conv_.visit(fn);
    bn2_.visit(fn);
  }
  template <typename F>
  void visit_buffers(F&& fn) {
    bn1_.visit_buffers(fn);
    bn2_.visit_buffers(fn);
  }

 private:
  MultiHeadConv<S> heads_;
  BatchNorm2d<S> bn1_;
  Conv2d<S> conv_;
  BatchNorm2d<S> bn2_;
};

// 3D convolution with kernel (T, 3, 3), no temporal padding: collapses T frames
// to one while keeping the channel count. Implemented as a 3x3 convolution over
// frame-stacked channels; the weight (k, T*k, 3, 3) indexes input channel
// t*k + c, i.e. it is the (k, k, T, 3, 3) Conv3D kernel with (c, t) transposed.
template <typename S>
class TemporalFusion {
 public:
  TemporalFusion() = default;
  TemporalFusion(const std::string& name, std::size_t channels, std::size_t frames)
      : frames_(frames), conv_(name, channels * frames, channels) {}

  std::size_t frames() const { return frames_; }

  // (k, B*T, H, W) -> (k, B, H, W)
  Tensor<S> forward(const Tensor<S>& feats) const {
    return conv_.forward(stack(feats));
  }

  Tensor<S> backward(const Tensor<S>& feats, const Tensor<S>& dy) {
    return unstack(conv_.backward(stack(feats), dy));
  }

  void init(Rng& rng) { conv_.init(rng); }

  template <typename F>
  void visit(F&& fn) {
    conv_.visit(fn);
  }

  // (k, B*T, H, W) -> (T*k, B, H, W)
  Tensor<S> stack(const Tensor<S>& f) const {
    const std::size_t K = f.dim(0), NT = f.dim(1), P = f.dim(2) * f.dim(3);
    if (NT % frames_)
      throw ContractError("temporal fusion: frame axis " + std::to_string(NT) + " is not a multiple of T=" +
                          std::to_string(frames_));
    const std::size_t B = NT / frames_;
    Tensor<S> out({frames_ * K, B, f.dim(2), f.dim(3)});
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < frames_; ++t) {
          const S* src = f.data() + (k * NT + b * frames_ + t) * P;
          std::copy(src, src + P, out.data() + ((t * K + k) * B + b) * P);
        }
    return out;
  }

  Tensor<S> unstack(const Tensor<S>& g) const {
    const std::size_t K = g.dim(0) / frames_, B = g.dim(1), P = g.dim(2) * g.dim(3);
    Tensor<S> out({K, B * frames_, g.dim(2), g.dim(3)});
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < frames_; ++t) {
          const S* src = g.data() + ((t * K + k) * B + b) * P;
          std::copy(src, src + P, out.data() + (k * B * frames_ + b * frames_ + t) * P);
        }
    return out;
  }

 private:
  std::size_t frames_ = 1;
  Conv2d<S> conv_;
};

}  // namespace nn

template <typename S>
struct ForwardTape {
  std::size_t batch = 0;
  std::vector<nn::EncoderCache<S>> enc;
  Tensor<S> bottleneck;
  std::vector<nn::DecoderCache<S>> dec;
  Tensor<S> head_in;
};

template <typename S>
class TemporalSkipUNet {
 public:
  using Scalar = S;

  explicit TemporalSkipUNet(ModelConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t D = cfg_.depth, c = cfg_.in_channels, T = cfg_.frames;
    const bool fused = cfg_.variant == ModelVariant::kC3DSU;
    auto level_in = [&](std::size_t i) { return i == 0 ? c : cfg_.channels_at(i - 1); };
    for (std::size_t i = 0; i < D; ++i)
      enc_.emplace_back("enc" + std::to_string(i), level_in(i), cfg_.channels_at(i));
    if (fused) {
      for (std::size_t i = 0; i < D; ++i) fuse_.emplace_back("skip" + std::to_string(i), level_in(i), T);
      fuse_.emplace_back("bottleneck_fuse", cfg_.channels_at(D - 1), T);
    }
    std::size_t in = cfg_.channels_at(D - 1);
    for (std::size_t j = 0; j < D; ++j) {
      const std::size_t level = D - 1 - j;
      const std::size_t out = cfg_.channels_at(j + 2 <= D ? D - 2 - j : 0);
      dec_.emplace_back("dec" + std::to_string(j), in, level_in(level), out);
      in = out;
    }
    head_ = nn::Conv2d<S>("head", cfg_.base_channels, c);
    Rng rng(cfg_.seed);
    for (auto& e : enc_) e.init(rng);
    for (auto& f : fuse_) f.init(rng);
    for (auto& d : dec_) d.init(rng);
    head_.init(rng);
  }

  const ModelConfig& config() const { return cfg_; }

  void check_input(const Tensor<S>& clips) const {
    const auto& s = clips.shape();
    if (s.size() != 5 || s[1] != cfg_.in_channels || s[2] != cfg_.frames || s[0] == 0)
      throw ContractError("model expects (B, " + std::to_string(cfg_.in_channels) + ", " +
                          std::to_string(cfg_.frames) + ", H, W), got " + shape_str(s));
    const std::size_t div = cfg_.spatial_divisor();
    if (s[3] % div || s[4] % div || s[3] == 0 || s[4] == 0)
      throw ContractError("frame size " + std::to_string(s[3]) + "x" + std::to_string(s[4]) +
                          " not divisible by 2^depth = " + std::to_string(div));
    if (!clips.all_finite()) throw ContractError("model input contains non-finite values");
  }

  // Training-mode forward: batch statistics, running averages updated, tape
  // recorded for backward. Evaluation mode delegates to infer().
  Tensor<S> forward(const Tensor<S>& clips, nn::Mode mode, ForwardTape<S>* tape = nullptr) {
    if (mode == nn::Mode::kEval) return infer(clips);
    ForwardTape<S> local;
    ForwardTape<S>& t = tape ? *tape : local;
    Tensor<S> out = run(clips, nn::Mode::kTrain, &t);
    for (std::size_t i = 0; i < enc_.size(); ++i) enc_[i].update_running(t.enc[i]);
    for (std::size_t j = 0; j < dec_.size(); ++j) dec_[j].update_running(t.dec[j]);
    return out;
  }

  Tensor<S> infer(const Tensor<S>& clips) const { return run(clips, nn::Mode::kEval, nullptr); }

  // Accumulates parameter gradients; returns the gradient w.r.t. the clips.
  Tensor<S> backward(const ForwardTape<S>& tape, const Tensor<S>& grad_out) {
    const std::size_t B = tape.batch, c = cfg_.in_channels, T = cfg_.frames;
    const std::size_t H = grad_out.dim(3), W = grad_out.dim(4), P = H * W;
    expects(grad_out.shape() == Shape({B, c, 1, H, W}), "backward: gradient shape mismatch");
    Tensor<S> g({c, B, H, W});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        std::copy_n(grad_out.data() + (b * c + ch) * P, P, g.data() + (ch * B + b) * P);

    const std::size_t D = cfg_.depth;
    Tensor<S> dy = head_.backward(tape.head_in, g);
    std::vector<Tensor<S>> dskip(D);
    for (std::size_t j = D; j-- > 0;) {
      auto [dx, ds] = dec_[j].backward(tape.dec[j], dy);
      dy = std::move(dx);
      dskip[D - 1 - j] = std::move(ds);
    }
    Tensor<S> dfeat = fused() ? fuse_[D].backward(tape.bottleneck, dy) : std::move(dy);
    for (std::size_t i = D; i-- > 0;) {
      Tensor<S> d = enc_[i].backward(tape.enc[i], dfeat);
      d += fused() ? fuse_[i].backward(tape.enc[i].x, dskip[i]) : dskip[i];
      dfeat = std::move(d);
    }
    Tensor<S> dclips({B, c, T, H, W});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
          std::copy_n(dfeat.data() + (ch * B * T + b * T + t) * P, P, dclips.data() + ((b * c + ch) * T + t) * P);
    return dclips;
  }

  void zero_grad() {
    visit([](nn::Param<S>& p) { p.grad.fill(S(0)); });
  }

  // Deterministic traversal of trainable parameters.
  template <typename F>
  void visit(F&& fn) {
    for (auto& e : enc_) e.visit(fn);
    for (auto& f : fuse_) f.visit(fn);
    for (auto& d : dec_) d.visit(fn);
    head_.visit(fn);
  }
  template <typename F>
  void visit(F&& fn) const {
    const_cast<TemporalSkipUNet*>(this)->visit([&](nn::Param<S>& p) { fn(static_cast<const nn::Param<S>&>(p)); });
  }

  // Normalization running statistics (non-trainable state).
  template <typename F>
  void visit_buffers(F&& fn) {
    for (auto& e : enc_) e.visit_buffers(fn);
    for (auto& d : dec_) d.visit_buffers(fn);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const nn::Param<S>& p) { n += p.value.size(); });
    return n;
  }

 private:
  bool fused() const { return !fuse_.empty(); }

  Tensor<S> run(const Tensor<S>& clips, nn::Mode mode, ForwardTape<S>* tape) const {
    check_input(clips);
    const std::size_t B = clips.dim(0), c = cfg_.in_channels, T = cfg_.frames;
    const std::size_t H = clips.dim(3), W = clips.dim(4), P = H * W, D = cfg_.depth;

    Tensor<S> feat({c, B * T, H, W});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t t = 0; t < T; ++t)
          std::copy_n(clips.data() + ((b * c + ch) * T + t) * P, P, feat.data() + (ch * B * T + b * T + t) * P);

    if (tape) {
      tape->batch = B;
      tape->enc.assign(D, {});
      tape->dec.assign(D, {});
    }
    std::vector<Tensor<S>> skips(D);
    for (std::size_t i = 0; i < D; ++i) {
      skips[i] = fused() ? fuse_[i].forward(feat) : feat;
      feat = enc_[i].forward(feat, mode, tape ? &tape->enc[i] : nullptr);
    }
    Tensor<S> y = fused() ? fuse_[D].forward(feat) : feat;
    if (tape) tape->bottleneck = std::move(feat);
    for (std::size_t j = 0; j < D; ++j) y = dec_[j].forward(y, skips[D - 1 - j], mode, tape ? &tape->dec[j] : nullptr);
    Tensor<S> out = head_.forward(y);
    if (tape) tape->head_in = std::move(y);

    Tensor<S> result({B, c, 1, H, W});
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        std::copy_n(out.data() + (ch * B + b) * P, P, result.data() + (b * c + ch) * P);
    return result;
  }

  ModelConfig cfg_;
  std::vector<nn::EncoderBlock<S>> enc_;
  std::vector<nn::TemporalFusion<S>> fuse_;
  std::vector<nn::DecoderBlock<S>> dec_;
  nn::Conv2d<S> head_;
};

}  // namespace ddl
