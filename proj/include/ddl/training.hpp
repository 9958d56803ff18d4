#pragma once

// Training loop: paired normal / pseudo-anomalous branches, the loss, and a
// joint optimizer step on the network and the anomaly logit.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "ddl/checkpoint.hpp"
#include "ddl/clipio.hpp"
#include "ddl/config.hpp"
#include "ddl/losses.hpp"
#include "ddl/masking.hpp"
#include "ddl/optim.hpp"
#include "ddl/pseudo.hpp"

namespace ddl {

enum RngPurpose : std::uint64_t { kDataStream = 11, kNoiseStream = 12, kMaskStream = 13 };

template <typename S = float>
struct TrainState {
  TemporalSkipUNet<S> model;
  AnomalyWeight weight;
  Adam<S> adam;
  ScalarAdam ell_adam;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  Rng data_rng, noise_rng, mask_rng;

  TrainState(const TrainConfig& cfg, std::size_t in_channels)
      : model(cfg.resolved_model(in_channels)),
        weight(0.0, cfg.mode == TrainMode::kDDL),
        adam(AdamConfig{cfg.learning_rate}),
        ell_adam(AdamConfig{cfg.ell_lr()}),
        data_rng(Rng::stream(cfg.seed, kDataStream)),
        noise_rng(Rng::stream(cfg.seed, kNoiseStream)),
        mask_rng(Rng::stream(cfg.seed, kMaskStream)) {}
};

// One training video held in memory.
struct TrainVideo {
  FrameSequence seq;
  GroundTruthLabels labels;
  TrackedObjectSet tracks;
};

// A window of a training video, by start frame.
struct SampleRef {
  std::size_t video = 0;
  std::size_t start = 0;
};

inline std::vector<TrainVideo> load_train_videos(const DatasetManifest& m) {
  std::vector<TrainVideo> out;
  for (const auto& e : m.train) {
    TrainVideo v{load_video_frames(m, e), load_labels(m.path_of(e.labels), e.frames, e.id),
                 TrackedObjectSet(m.height, m.width, e.frames)};
    if (!e.tracks.empty()) v.tracks = load_tracks(m.path_of(e.tracks), m.height, m.width, e.frames);
    out.push_back(std::move(v));
  }
  return out;
}

inline std::vector<SampleRef> enumerate_windows(const std::vector<TrainVideo>& videos, std::size_t T) {
  std::vector<SampleRef> refs;
  for (std::size_t v = 0; v < videos.size(); ++v)
    for (std::size_t s = 0; s + T <= videos[v].seq.frame_count(); ++s) refs.push_back({v, s});
  return refs;
}

// Middle frame of every clip: (B, c, T, H, W) -> (B, c, 1, H, W).
template <typename S>
Tensor<S> middle_frames(const Tensor<S>& clips) {
  const std::size_t B = clips.dim(0), C = clips.dim(1), T = clips.dim(2), P = clips.dim(3) * clips.dim(4);
  Tensor<S> out({B, C, 1, clips.dim(3), clips.dim(4)});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      std::copy_n(clips.data() + ((b * C + c) * T + (T - 1) / 2) * P, P, out.data() + (b * C + c) * P);
  return out;
}

template <typename S>
std::span<const S> sample_span(const Tensor<S>& t, std::size_t b) {
  const std::size_t n = t.size() / t.dim(0);
  return {t.data() + b * n, n};
}
template <typename S>
std::span<S> sample_span(Tensor<S>& t, std::size_t b) {
  const std::size_t n = t.size() / t.dim(0);
  return {t.data() + b * n, n};
}

// Everything that enters one optimizer step, with the random draws already made.
template <typename S>
struct StepInputs {
  Tensor<S> clips;  // X, (B, c, T, H, W)
  Tensor<S> noise;  // A, same shape (empty without the distinction branch)
  Tensor<S> mask;   // M, same shape
};

struct StepResult {
  LossBreakdown loss;
  double d_ell = 0.0;  // dL/d ell, before any freezing
};

// Forward and backward of the batch loss (mean over samples of
// recon + lambda * dist). Parameter gradients are accumulated into the model.
template <typename S>
StepResult loss_and_gradients(TemporalSkipUNet<S>& model, const AnomalyWeight& weight, const StepInputs<S>& in,
                              TrainMode mode, const LossConfig& lc) {
  const std::size_t B = in.clips.dim(0);
  const double inv_b = 1.0 / static_cast<double>(B);
  StepResult r;

  ForwardTape<S> tape_x;
  const Tensor<S> f_x = model.forward(in.clips, nn::Mode::kTrain, &tape_x);
  const Tensor<S> x_t = middle_frames(in.clips);
  Tensor<S> d_fx(f_x.shape());
  double recon = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double l = recon_loss<S>(sample_span(x_t, b), sample_span(f_x, b));
    recon += l * inv_b;
    recon_loss_backward<S>(sample_span(x_t, b), sample_span(f_x, b), l, inv_b, sample_span(d_fx, b));
  }

  if (mode == TrainMode::kNone) {
    r.loss = total_loss(recon, std::nullopt, lc);
    model.backward(tape_x, d_fx);
    return r;
  }

  const double w = weight.value();
  const Tensor<S> xa = compose_pseudo(in.clips, blend_noise(in.clips, in.noise, w), in.mask);
  ForwardTape<S> tape_a;
  const Tensor<S> f_xa = model.forward(xa, nn::Mode::kTrain, &tape_a);
  const Tensor<S> xa_t = middle_frames(xa), m_t = middle_frames(in.mask);
  Tensor<S> d_fxa(f_xa.shape()), d_xat(xa_t.shape());
  DistinctionTerms mean;
  mean.dist = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const auto t = distinction_loss<S>(sample_span(x_t, b), sample_span(xa_t, b), sample_span(f_xa, b),
                                       sample_span(m_t, b), lc.epsilon);
    mean.p += t.p * inv_b;
    mean.n += t.n * inv_b;
    mean.dist += t.dist * inv_b;
    mean.support += t.support;
    distinction_loss_backward<S>(sample_span(x_t, b), sample_span(xa_t, b), sample_span(f_xa, b),
                                 sample_span(m_t, b), t, lc.epsilon, lc.lambda * inv_b, sample_span(d_fxa, b),
                                 sample_span(d_xat, b));
  }
  r.loss = total_loss(recon, mean, lc);

  model.backward(tape_x, d_fx);
  Tensor<S> d_xa = model.backward(tape_a, d_fxa);
  // The distinction loss also sees the middle frame of X_A directly.
  const std::size_t C = xa.dim(1), T = xa.dim(2), P = xa.dim(3) * xa.dim(4);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c) {
      S* dst = d_xa.data() + ((b * C + c) * T + (T - 1) / 2) * P;
      const S* src = d_xat.data() + (b * C + c) * P;
      for (std::size_t i = 0; i < P; ++i) dst[i] += src[i];
    }
  r.d_ell = weight.slope() * weight_gradient(d_xa, in.clips, in.noise, in.mask);
  return r;
}

template <typename S>
void check_finite(const LossBreakdown& l, const std::vector<ClipWindow>& windows) {
  if (std::isfinite(l.total)) return;
  std::ostringstream os;
  os << "non-finite loss (recon " << l.recon;
  if (l.dist) os << ", P " << *l.p << ", N " << *l.n << ", dist " << *l.dist;
  os << ") on batch windows:";
  for (const auto& w : windows) os << ' ' << w.video_id << '@' << w.center_index;
  throw NumericError(os.str());
}

// Builds the batch from the given windows, draws masks and noise, and takes
// one optimizer step on the network and (in DDL mode) the anomaly logit.
template <typename S>
LossBreakdown train_step(TrainState<S>& st, const std::vector<TrainVideo>& videos, const std::vector<SampleRef>& batch,
                         const TrainConfig& cfg) {
  expects(!batch.empty(), "train_step: empty batch");
  const auto& mc = st.model.config();
  const std::size_t T = mc.frames;
  std::vector<ClipWindow> windows;
  for (const auto& ref : batch) {
    const TrainVideo& v = videos.at(ref.video);
    for (std::size_t f = ref.start; f < ref.start + T; ++f)
      if (v.labels.labels.at(f) != 0)
        throw ContractError("train_step: video " + v.seq.video_id + " frame " + std::to_string(f) +
                            " is labeled anomalous; training data must be normal");
    windows.push_back(extract_window(v.seq, ref.start, T));
  }
  const std::size_t B = windows.size(), C = mc.in_channels;
  const std::size_t H = windows[0].data.dim(2), W = windows[0].data.dim(3), n = C * T * H * W;
  StepInputs<S> in{Tensor<S>({B, C, T, H, W}), {}, {}};
  for (std::size_t b = 0; b < B; ++b)
    std::transform(windows[b].data.data(), windows[b].data.data() + n, in.clips.data() + b * n,
                   [](float v) { return static_cast<S>(v); });
  if (cfg.mode != TrainMode::kNone) {
    in.noise = Tensor<S>(in.clips.shape());
    in.mask = Tensor<S>(in.clips.shape());
    for (std::size_t b = 0; b < B; ++b) {
      const auto m = random_object_mask(videos[batch[b].video].tracks, batch[b].start, T, C, st.mask_rng);
      std::transform(m.mask.data(), m.mask.data() + n, in.mask.data() + b * n,
                     [](std::uint8_t v) { return static_cast<S>(v); });
      const auto a = sample_noise<S>({C, T, H, W}, st.noise_rng);
      std::copy_n(a.data(), n, in.noise.data() + b * n);
    }
  }

  st.model.zero_grad();
  const StepResult r = loss_and_gradients(st.model, st.weight, in, cfg.mode, cfg.loss);
  check_finite<S>(r.loss, windows);
  st.adam.step(st.model);
  if (st.weight.trainable()) st.weight.set_ell(st.ell_adam.step(st.weight.ell(), r.d_ell));
  ++st.step;
  return r.loss;
}

// ---- resumable state ----

template <typename S>
void save_train_state(const std::filesystem::path& path, TrainState<S>& st, const TrainConfig& cfg) {
  ContainerWriter w;
  add_model(w, st.model);
  for (const auto& [name, mv] : st.adam.moments()) {
    w.add("adam.m." + name, mv.first);
    w.add("adam.v." + name, mv.second);
  }
  json h{{"kind", "train_state"},
         {"version", kCheckpointVersion},
         {"scalar", scalar_tag<S>()},
         {"config", to_json_value(st.model.config())},
         {"mode", to_string(cfg.mode)},
         {"ell", st.weight.ell()},
         {"step", st.step},
         {"epoch", st.epoch},
         {"adam_steps", st.adam.steps()},
         {"ell_adam", {{"m", st.ell_adam.m}, {"v", st.ell_adam.v}, {"t", st.ell_adam.t}}},
         {"rng", {{"data", st.data_rng.state()}, {"noise", st.noise_rng.state()}, {"mask", st.mask_rng.state()}}}};
  w.write(path, std::move(h));
}

template <typename S>
TrainState<S> load_train_state(const std::filesystem::path& path, const TrainConfig& cfg, std::size_t in_channels) {
  ContainerReader r(path);
  const json& h = r.header();
  if (h.value("kind", std::string()) != "train_state") throw IngestError(path.string() + ": not a training state file");
  const ModelConfig mc = checkpoint_model_config(r, path.string());
  TrainState<S> st(cfg, in_channels);
  if (!(mc == st.model.config())) throw IngestError(path.string() + ": model configuration differs from the run config");
  try {
    read_model(r, st.model);
    st.weight = AnomalyWeight(h.at("ell").get<double>(), cfg.mode == TrainMode::kDDL);
    st.step = h.at("step").get<std::uint64_t>();
    st.epoch = h.at("epoch").get<std::uint64_t>();
    st.adam.set_steps(h.at("adam_steps").get<std::uint64_t>());
    st.model.visit([&](nn::Param<S>& p) {
      if (!r.has("adam.m." + p.name)) return;
      st.adam.moments()[p.name] = {r.template tensor<S>("adam.m." + p.name), r.template tensor<S>("adam.v." + p.name)};
    });
    const json& ea = h.at("ell_adam");
    st.ell_adam.m = ea.at("m").get<double>();
    st.ell_adam.v = ea.at("v").get<double>();
    st.ell_adam.t = ea.at("t").get<std::uint64_t>();
    st.data_rng.restore(h.at("rng").at("data").get<std::string>());
    st.noise_rng.restore(h.at("rng").at("noise").get<std::string>());
    st.mask_rng.restore(h.at("rng").at("mask").get<std::string>());
  } catch (const json::exception& e) {
    throw IngestError(path.string() + ": corrupt training state: " + e.what());
  }
  return st;
}

// ---- fit ----

inline std::string fmt_num(double v, int digits = 9) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

struct FitResult {
  std::filesystem::path final_checkpoint;
  double final_ell = 0.0;
  LossBreakdown last;
  std::uint64_t steps = 0;
};

using FitProgress = std::function<void(std::uint64_t epoch, double mean_recon, double sigma)>;

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out << text;
  if (!out) throw IoError("short write to " + p.string());
}

// Trains on the train split of cfg.train.data and writes every artifact
// into cfg.train.out.
inline FitResult fit(const RunConfig& rc, const FitProgress& progress = {}) {
  const TrainConfig& cfg = rc.train;
  cfg.validate();
  if (cfg.data.empty()) throw ConfigError("train.data is not set");
  if (cfg.out.empty()) throw ConfigError("train.out is not set");
  const auto manifest = load_manifest(cfg.data);
  const auto videos = load_train_videos(manifest);
  if (videos.empty()) throw IngestError("dataset has no training videos");

  const std::filesystem::path out(cfg.out);
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());

  TrainState<float> st(cfg, manifest.channels);
  RunConfig echo = rc;
  echo.train.model = st.model.config();
  echo.train.model_seed_explicit = true;
  write_text(out / "run_config.json", to_json_value(echo).dump(2) + "\n");

  const bool pseudo = cfg.mode != TrainMode::kNone;
  std::ofstream log(out / "train_log.csv", std::ios::binary);
  if (!log) throw IoError("cannot write train_log.csv in " + out.string());
  log << "step,recon,P,N,dist,total,sigma\n";
  std::ofstream trace;
  if (pseudo) {
    trace.open(out / "sigma_trace.csv", std::ios::binary);
    if (!trace) throw IoError("cannot write sigma_trace.csv in " + out.string());
    trace << "step,ell,sigma\n0," << fmt_num(st.weight.ell(), 17) << ',' << fmt_num(st.weight.value(), 17) << '\n';
  }

  auto ckpt = [&](std::uint64_t epoch) {
    const auto p = out / ("checkpoint_epoch_" + std::to_string(epoch) + ".ckpt");
    std::optional<double> ell;
    if (pseudo) ell = st.weight.ell();
    save_checkpoint(p, st.model, ell, json{{"mode", to_string(cfg.mode)}, {"epoch", epoch}, {"step", st.step}});
    return p;
  };
  FitResult res;
  res.final_checkpoint = ckpt(0);

  auto refs = enumerate_windows(videos, st.model.config().frames);
  if (refs.empty()) throw IngestError("training videos are shorter than the clip length");
  for (std::uint64_t e = 1; e <= cfg.epochs; ++e) {
    st.data_rng.shuffle(refs.begin(), refs.end());
    double recon_sum = 0.0;
    std::size_t nb = 0;
    for (std::size_t i = 0; i < refs.size(); i += cfg.batch_size) {
      const std::vector<SampleRef> batch(refs.begin() + static_cast<long>(i),
                                         refs.begin() + static_cast<long>(std::min(refs.size(), i + cfg.batch_size)));
      const LossBreakdown l = train_step(st, videos, batch, cfg);
      res.last = l;
      recon_sum += l.recon;
      ++nb;
      log << st.step << ',' << fmt_num(l.recon) << ',';
      if (l.dist) log << fmt_num(*l.p) << ',' << fmt_num(*l.n) << ',' << fmt_num(*l.dist);
      else log << ",,";
      log << ',' << fmt_num(l.total) << ',';
      if (pseudo) {
        log << fmt_num(st.weight.value());
        trace << st.step << ',' << fmt_num(st.weight.ell(), 17) << ',' << fmt_num(st.weight.value(), 17) << '\n';
      }
      log << '\n';
    }
    st.epoch = e;
    log.flush();
    if (pseudo) trace.flush();
    if (!log || (pseudo && !trace)) throw IoError("write failure in " + out.string());
    res.final_checkpoint = ckpt(e);
    save_train_state(out / "train_state.bin", st, cfg);
    if (progress) progress(e, recon_sum / static_cast<double>(nb), st.weight.value());
  }
  if (cfg.epochs == 0) save_train_state(out / "train_state.bin", st, cfg);
  std::filesystem::copy_file(res.final_checkpoint, out / "final.ckpt", std::filesystem::copy_options::overwrite_existing, ec);
  if (ec) throw IoError("cannot write final.ckpt: " + ec.message());
  res.final_checkpoint = out / "final.ckpt";
  res.final_ell = st.weight.ell();
  res.steps = st.step;
  return res;
}

// ---- run summary ----

struct RunSummary {
  TrainMode mode = TrainMode::kDDL;
  std::size_t epochs = 0;
  std::uint64_t steps = 0;
  std::optional<double> final_sigma, initial_sigma;
  std::optional<double> final_recon, final_total, final_dist;
  ModelConfig model;
};

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw IngestError("cannot open " + p.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline std::optional<double> parse_cell(const std::string& s) {
  if (s.empty()) return std::nullopt;
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    throw IngestError("bad numeric cell '" + s + "'");
  }
}

inline RunSummary describe_run(const std::filesystem::path& dir) {
  const auto cfg_path = dir / "run_config.json";
  if (!std::filesystem::exists(cfg_path)) throw IngestError("run directory lacks run_config.json: " + dir.string());
  RunConfig rc;
  try {
    rc = load_run_config(cfg_path);
  } catch (const ConfigError& e) {
    throw IngestError(std::string("bad run_config.json: ") + e.what());
  }
  RunSummary s;
  s.mode = rc.train.mode;
  s.epochs = rc.train.epochs;
  s.model = rc.train.model;
  const auto log = read_csv(dir / "train_log.csv");
  if (log.size() > 1) {
    const auto& last = log.back();
    if (last.size() < 7) throw IngestError("truncated train_log.csv row");
    s.steps = static_cast<std::uint64_t>(std::stoull(last[0]));
    s.final_recon = parse_cell(last[1]);
    s.final_dist = parse_cell(last[4]);
    s.final_total = parse_cell(last[5]);
  }
  if (s.mode != TrainMode::kNone) {
    const auto trace_path = dir / "sigma_trace.csv";
    if (!std::filesystem::exists(trace_path))
      throw IngestError("run directory lacks sigma_trace.csv for a " + to_string(s.mode) + " run");
    const auto trace = read_csv(trace_path);
    if (trace.size() < 2) throw IngestError("sigma_trace.csv has no records");
    s.initial_sigma = parse_cell(trace[1].at(2));
    s.final_sigma = parse_cell(trace.back().at(2));
  }
  return s;
}

}  // namespace ddl
