#pragma once

// Run report: error-map panels (original | reconstruction | residual), the
// anomaly-weight trace as a line plot, and a plain-text summary.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "ddl/png_io.hpp"
#include "ddl/synth.hpp"
#include "ddl/scoring.hpp"
#include "ddl/training.hpp"

namespace ddl {

struct ReportOptions {
  std::size_t frames_per_video = 1;  // highest-scoring frames of each test video
  std::size_t max_videos = 4;
  std::string checkpoint = "final.ckpt";  // relative to the run directory
};

struct ReportResult {
  std::vector<std::filesystem::path> panels;
  std::optional<std::filesystem::path> sigma_plot;
  std::filesystem::path summary;
};

// Grayscale of a (c, H, W) frame, averaged over channels and clamped to [0, 1].
inline std::vector<double> gray(const Tensor<float>& f) {
  const std::size_t C = f.dim(0), P = f.dim(1) * f.dim(2);
  std::vector<double> g(P, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < P; ++i) g[i] += f[c * P + i] / static_cast<double>(C);
  for (auto& v : g) v = std::clamp(v, 0.0, 1.0);
  return g;
}

// Three tiles side by side, separated by a 2-pixel white gutter.
inline Image8 panel_image(const std::vector<std::vector<double>>& tiles, std::size_t H, std::size_t W) {
  constexpr std::size_t kGutter = 2;
  Image8 img;
  img.width = tiles.size() * W + (tiles.size() - 1) * kGutter;
  img.height = H;
  img.channels = 1;
  img.pixels.assign(img.width * img.height, 255);
  for (std::size_t k = 0; k < tiles.size(); ++k)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) img.pixels[y * img.width + k * (W + kGutter) + x] = to_byte(tiles[k][y * W + x]);
  return img;
}

// Residual tile: the per-pixel error map clamped to [0, 1].
inline std::vector<double> residual_tile(const Tensor<float>& original, const Tensor<float>& recon) {
  const auto m = pixel_error_map(original, recon);
  std::vector<double> r(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) r[i] = std::clamp(m[i], 0.0, 1.0);
  return r;
}

inline Image8 plot_trace(const std::vector<std::pair<double, double>>& pts, std::size_t W = 480, std::size_t H = 240) {
  Image8 img(W, H, 1);
  std::fill(img.pixels.begin(), img.pixels.end(), std::uint8_t{255});
  const std::size_t L = 30, R = 10, T = 10, B = 20;
  const std::size_t pw = W - L - R, ph = H - T - B;
  auto put = [&](long x, long y, std::uint8_t v) {
    if (x >= 0 && y >= 0 && x < static_cast<long>(W) && y < static_cast<long>(H))
      img.pixels[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] = v;
  };
  auto ypix = [&](double s) { return static_cast<long>(T + std::lround((1.0 - s) * static_cast<double>(ph - 1))); };
  for (double g : {0.0, 0.25, 0.5, 0.75, 1.0})
    for (std::size_t x = L; x < L + pw; x += (g == 0.0 || g == 1.0) ? 1 : 3) put(static_cast<long>(x), ypix(g), 170);
  for (std::size_t y = T; y < T + ph; ++y) put(static_cast<long>(L), static_cast<long>(y), 0);
  for (std::size_t x = L; x < L + pw; ++x) put(static_cast<long>(x), ypix(0.0), 0);
  if (pts.empty()) return img;
  const double x_max = std::max(1.0, pts.back().first);
  long px = -1, py = -1;
  for (const auto& [step, sigma] : pts) {
    const long x = static_cast<long>(L) + std::lround(step / x_max * static_cast<double>(pw - 1));
    const long y = ypix(std::clamp(sigma, 0.0, 1.0));
    if (px < 0) put(x, y, 0);
    else {
      const long n = std::max(std::abs(x - px), std::abs(y - py));
      for (long i = 0; i <= n; ++i) {
        const double t = n ? static_cast<double>(i) / static_cast<double>(n) : 0.0;
        put(px + std::lround(t * static_cast<double>(x - px)), py + std::lround(t * static_cast<double>(y - py)), 0);
      }
    }
    px = x;
    py = y;
  }
  return img;
}

inline std::string summary_text(const RunSummary& s) {
  std::ostringstream os;
  auto opt = [](const std::optional<double>& v) { return v ? fmt_num(*v) : std::string("n/a"); };
  os << "mode: " << to_string(s.mode) << '\n'
     << "variant: " << to_string(s.model.variant) << '\n'
     << "frames: " << s.model.frames << '\n'
     << "base_channels: " << s.model.base_channels << '\n'
     << "depth: " << s.model.depth << '\n'
     << "epochs: " << s.epochs << '\n'
     << "steps: " << s.steps << '\n'
     << "initial_sigma: " << opt(s.initial_sigma) << '\n'
     << "final_sigma: " << opt(s.final_sigma) << '\n'
     << "final_recon: " << opt(s.final_recon) << '\n'
     << "final_dist: " << opt(s.final_dist) << '\n'
     << "final_total: " << opt(s.final_total) << '\n';
  return os.str();
}

inline ReportResult write_report(const std::filesystem::path& run, const std::filesystem::path& out,
                                 const ReportOptions& opt = {}) {
  const RunSummary summary = describe_run(run);
  const RunConfig rc = load_run_config(run / "run_config.json");
  const auto ckpt_path = run / opt.checkpoint;
  if (!std::filesystem::exists(ckpt_path)) throw IngestError("run directory lacks " + opt.checkpoint);
  const auto ckpt = load_checkpoint<float>(ckpt_path);
  const auto manifest = load_manifest(rc.train.data);

  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  ReportResult res;

  const std::size_t nv = std::min(opt.max_videos, manifest.test.size());
  for (std::size_t v = 0; v < nv; ++v) {
    const auto seq = load_video_frames(manifest, manifest.test[v]);
    const auto recs = reconstruct_video(ckpt.model, seq, rc.score.batch);
    std::vector<std::pair<double, std::size_t>> ranked;
    for (std::size_t i = 0; i < recs.size(); ++i)
      ranked.push_back({-frame_score(pixel_error_map(seq.frame(recs[i].frame_index), recs[i].frame), rc.score.patch), i});
    std::sort(ranked.begin(), ranked.end());
    for (std::size_t k = 0; k < std::min(opt.frames_per_video, ranked.size()); ++k) {
      const auto& r = recs[ranked[k].second];
      const auto original = seq.frame(r.frame_index);
      const auto img = panel_image({gray(original), gray(r.frame), residual_tile(original, r.frame)}, seq.height(),
                                   seq.width());
      const auto p = out / ("panel_" + seq.video_id + "_" + synth_detail::frame_name(r.frame_index));
      write_png(p, img);
      res.panels.push_back(p);
    }
  }

  if (summary.mode != TrainMode::kNone) {
    const auto rows = read_csv(run / "sigma_trace.csv");
    std::vector<std::pair<double, double>> pts;
    for (std::size_t i = 1; i < rows.size(); ++i)
      pts.push_back({parse_cell(rows[i].at(0)).value_or(0.0), parse_cell(rows[i].at(2)).value_or(0.0)});
    res.sigma_plot = out / "sigma_trace.png";
    write_png(*res.sigma_plot, plot_trace(pts));
  }
  res.summary = out / "summary.txt";
  write_text(res.summary, summary_text(summary));
  return res;
}

}  // namespace ddl
