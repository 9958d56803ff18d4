#pragma once

// Inference-time scoring: sliding-window reconstructions, per-pixel error
// maps, patch-max frame scores, temporal median filtering, per-video min-max
// normalization and frame-level ROC-AUC.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ddl/checkpoint.hpp"
#include "ddl/clipio.hpp"
#include "ddl/config.hpp"
#include "ddl/training.hpp"

namespace ddl {

struct ErrorMap {
  Tensor<double> values;  // (H, W), >= 0
  std::size_t frame_index = 0;
  std::string video_id;
};

struct Reconstruction {
  std::size_t frame_index = 0;
  Tensor<float> frame;  // (c, H, W)
};

// One reconstruction of the middle frame per stride-1 window, evaluation mode.
template <typename S>
std::vector<Reconstruction> reconstruct_video(const TemporalSkipUNet<S>& model, const FrameSequence& seq,
                                              std::size_t batch = 8) {
  const std::size_t T = model.config().frames;
  if (seq.frame_count() < T)
    throw ContractError("reconstruct_video: " + std::to_string(seq.frame_count()) + " frames is fewer than T = " +
                        std::to_string(T));
  expects(batch >= 1, "reconstruct_video: batch must be >= 1");
  const auto windows = sliding_windows(seq, T);
  const std::size_t C = seq.channels(), H = seq.height(), W = seq.width(), n = C * T * H * W, P = H * W;
  std::vector<Reconstruction> out;
  out.reserve(windows.size());
  for (std::size_t i = 0; i < windows.size(); i += batch) {
    const std::size_t B = std::min(batch, windows.size() - i);
    Tensor<S> clips({B, C, T, H, W});
    for (std::size_t b = 0; b < B; ++b)
      std::transform(windows[i + b].data.data(), windows[i + b].data.data() + n, clips.data() + b * n,
                     [](float v) { return static_cast<S>(v); });
    const Tensor<S> rec = model.infer(clips);
    for (std::size_t b = 0; b < B; ++b) {
      Reconstruction r{windows[i + b].center_index, Tensor<float>({C, H, W})};
      std::transform(rec.data() + b * C * P, rec.data() + (b + 1) * C * P, r.frame.data(),
                     [](S v) { return static_cast<float>(v); });
      out.push_back(std::move(r));
    }
  }
  return out;
}

// Per-pixel Euclidean distance across channels.
template <typename S>
Tensor<double> pixel_error_map(const Tensor<S>& x, const Tensor<S>& xhat) {
  expect_same_shape(x, xhat, "pixel_error_map");
  expects(x.rank() == 3, "pixel_error_map expects (c, H, W) frames");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2), P = H * W;
  Tensor<double> m({H, W});
  for (std::size_t i = 0; i < P; ++i) {
    double ss = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double d = static_cast<double>(x[c * P + i]) - static_cast<double>(xhat[c * P + i]);
      ss += d * d;
    }
    m[i] = std::sqrt(ss);
  }
  return m;
}

// Maximum patch mean over a non-overlapping grid anchored at the origin.
// Partial patches at the right and bottom edges average their actual pixels.
inline double frame_score(const Tensor<double>& map, std::size_t patch = 16) {
  expects(map.rank() == 2 && map.size() > 0, "frame_score expects a non-empty (H, W) map");
  expects(patch >= 1, "frame_score: patch must be >= 1");
  const std::size_t H = map.dim(0), W = map.dim(1);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t y0 = 0; y0 < H; y0 += patch)
    for (std::size_t x0 = 0; x0 < W; x0 += patch) {
      const std::size_t y1 = std::min(H, y0 + patch), x1 = std::min(W, x0 + patch);
      double sum = 0.0;
      for (std::size_t y = y0; y < y1; ++y)
        for (std::size_t x = x0; x < x1; ++x) sum += map(y, x);
      best = std::max(best, sum / static_cast<double>((y1 - y0) * (x1 - x0)));
    }
  return best;
}

// Centered running median with replicate padding; output length = input length.
inline std::vector<double> median_filter(const std::vector<double>& s, std::size_t window = 17) {
  if (window % 2 == 0) throw ContractError("median_filter: window must be odd, got " + std::to_string(window));
  if (s.empty() || window == 1) return s;
  const std::size_t h = window / 2, n = s.size();
  std::vector<double> out(n), buf(window);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < window; ++k) {
      const long j = static_cast<long>(i + k) - static_cast<long>(h);
      buf[k] = s[static_cast<std::size_t>(std::clamp<long>(j, 0, static_cast<long>(n) - 1))];
    }
    std::nth_element(buf.begin(), buf.begin() + static_cast<long>(h), buf.end());
    out[i] = buf[h];
  }
  return out;
}

// (s - min) / (max - min); a constant series maps to zeros.
inline std::vector<double> normalize_per_video(const std::vector<double>& s) {
  if (s.empty()) return s;
  const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
  const double a = *lo, span = *hi - *lo;
  std::vector<double> out(s.size(), 0.0);
  if (span > 0.0)
    for (std::size_t i = 0; i < s.size(); ++i) out[i] = (s[i] - a) / span;
  return out;
}

// Area under the ROC curve via the rank-sum statistic with midranks, which
// counts tied positive/negative pairs as one half.
inline double roc_auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  expects(scores.size() == labels.size(), "roc_auc: scores and labels differ in length");
  std::size_t npos = 0;
  for (auto l : labels) {
    expects(l == 0 || l == 1, "roc_auc: labels must be 0 or 1");
    npos += l;
  }
  const std::size_t nneg = labels.size() - npos;
  if (npos == 0 || nneg == 0) throw ContractError("roc_auc: labels contain a single class");
  std::vector<std::size_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) rank_sum += mid;
    i = j;
  }
  const double np = static_cast<double>(npos), nn = static_cast<double>(nneg);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

// Extends scores for frames (T-1)/2 .. F-1-(T-1)/2 to all F frames by
// repeating the nearest covered score.
inline std::vector<double> align_scores(const std::vector<double>& covered, std::size_t F, std::size_t T) {
  expects(T % 2 == 1, "align_scores: T must be odd");
  expects(F >= T && covered.size() == F - T + 1, "align_scores: covered scores do not match F - T + 1");
  const std::size_t h = (T - 1) / 2;
  std::vector<double> out(F);
  for (std::size_t f = 0; f < F; ++f) out[f] = covered[std::clamp(f, h, F - 1 - h) - h];
  return out;
}

inline double aggregate_scene_auc(std::vector<double> aucs) {
  if (aucs.empty()) throw ContractError("aggregate_scene_auc: no scenes");
  std::sort(aucs.begin(), aucs.end());
  const std::size_t n = aucs.size();
  return n % 2 ? aucs[n / 2] : 0.5 * (aucs[n / 2 - 1] + aucs[n / 2]);
}

// ---- per-video pipeline ----

struct VideoScores {
  std::string video_id;
  std::vector<double> raw, filtered, normalized;  // one per frame
};

template <typename S>
VideoScores score_video(const TemporalSkipUNet<S>& model, const FrameSequence& seq, const ScoreConfig& sc) {
  sc.validate();
  const auto recs = reconstruct_video(model, seq, sc.batch);
  std::vector<double> covered;
  covered.reserve(recs.size());
  for (const auto& r : recs) covered.push_back(frame_score(pixel_error_map(seq.frame(r.frame_index), r.frame), sc.patch));
  VideoScores v;
  v.video_id = seq.video_id;
  v.raw = align_scores(covered, seq.frame_count(), model.config().frames);
  v.filtered = median_filter(v.raw, sc.median);
  v.normalized = sc.normalize ? normalize_per_video(v.filtered) : v.filtered;
  return v;
}

inline void write_scores_csv(const std::filesystem::path& path, const VideoScores& v) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "frame_index,raw,filtered,normalized\n";
  for (std::size_t f = 0; f < v.raw.size(); ++f)
    out << f << ',' << fmt_num(v.raw[f], 17) << ',' << fmt_num(v.filtered[f], 17) << ','
        << fmt_num(v.normalized[f], 17) << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

inline VideoScores read_scores_csv(const std::filesystem::path& path) {
  const auto rows = read_csv(path);
  if (rows.empty() || rows[0].size() != 4 || rows[0][0] != "frame_index")
    throw IngestError("malformed scores file " + path.string());
  VideoScores v;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].size() != 4) throw IngestError("malformed row in " + path.string());
    v.raw.push_back(parse_cell(rows[i][1]).value_or(0.0));
    v.filtered.push_back(parse_cell(rows[i][2]).value_or(0.0));
    v.normalized.push_back(parse_cell(rows[i][3]).value_or(0.0));
  }
  return v;
}

inline std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DDL_VAD_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) n = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

inline json score_config_json(const ScoreConfig& sc, const std::filesystem::path& checkpoint, const ModelConfig& mc) {
  return json{{"patch", sc.patch},   {"median", sc.median},         {"normalize", sc.normalize},
              {"batch", sc.batch},   {"checkpoint", checkpoint.string()}, {"T", mc.frames},
              {"model", to_json_value(mc)}};
}

// Scores every test video; writes <out>/<video_id>/scores.csv and
// <out>/score_config.json.
template <typename S = float>
std::vector<VideoScores> score_dataset(const TemporalSkipUNet<S>& model, const DatasetManifest& m,
                                       const std::filesystem::path& out, const ScoreConfig& sc,
                                       const std::filesystem::path& checkpoint = {}) {
  sc.validate();
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  const auto& videos = m.test;
  std::vector<VideoScores> results(videos.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto work = [&] {
    for (std::size_t i; (i = next++) < videos.size();) {
      try {
        results[i] = score_video(model, load_video_frames(m, videos[i]), sc);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < worker_count(videos.size()); ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  for (const auto& v : results) {
    std::filesystem::create_directories(out / v.video_id, ec);
    if (ec) throw IoError("cannot create " + (out / v.video_id).string());
    write_scores_csv(out / v.video_id / "scores.csv", v);
  }
  write_text(out / "score_config.json", score_config_json(sc, checkpoint, model.config()).dump(2) + "\n");
  return results;
}

// ---- evaluation ----

struct EvalResult {
  std::map<std::string, double> per_video;
  std::vector<std::string> skipped;  // single-class videos
  double dataset_auc = 0.0;
  std::map<std::string, double> per_scene;
  std::optional<double> scene_median;
};

using SceneMap = std::map<std::string, std::vector<std::string>>;

inline SceneMap load_scene_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open scene map " + path.string());
  try {
    return json::parse(in).get<SceneMap>();
  } catch (const json::exception& e) {
    throw IngestError("malformed scene map " + path.string() + " (expected {scene: [video ids]}): " + e.what());
  }
}

// Final scores come from the "normalized" column, which holds the filtered
// series when normalization was disabled at scoring time.
inline EvalResult evaluate(const std::filesystem::path& scores_dir, const DatasetManifest& m,
                           const std::optional<SceneMap>& scenes = {}) {
  EvalResult r;
  std::vector<double> all_s;
  std::vector<std::uint8_t> all_l;
  std::map<std::string, std::pair<std::vector<double>, std::vector<std::uint8_t>>> by_video;
  for (const auto& e : m.test) {
    const auto labels = load_labels(m.path_of(e.labels), e.frames, e.id);
    const auto scores = read_scores_csv(scores_dir / e.id / "scores.csv");
    if (scores.normalized.size() != labels.labels.size())
      throw IngestError("scores for video " + e.id + " have " + std::to_string(scores.normalized.size()) +
                        " rows, labels have " + std::to_string(labels.labels.size()));
    all_s.insert(all_s.end(), scores.normalized.begin(), scores.normalized.end());
    all_l.insert(all_l.end(), labels.labels.begin(), labels.labels.end());
    const auto npos = std::count(labels.labels.begin(), labels.labels.end(), 1);
    if (npos == 0 || npos == static_cast<long>(labels.labels.size())) r.skipped.push_back(e.id);
    else r.per_video[e.id] = roc_auc(scores.normalized, labels.labels);
    by_video[e.id] = {scores.normalized, labels.labels};
  }
  r.dataset_auc = roc_auc(all_s, all_l);
  if (scenes) {
    std::vector<double> aucs;
    for (const auto& [scene, ids] : *scenes) {
      std::vector<double> s;
      std::vector<std::uint8_t> l;
      for (const auto& id : ids) {
        auto it = by_video.find(id);
        if (it == by_video.end()) throw IngestError("scene " + scene + " lists unknown test video " + id);
        s.insert(s.end(), it->second.first.begin(), it->second.first.end());
        l.insert(l.end(), it->second.second.begin(), it->second.second.end());
      }
      const auto npos = std::count(l.begin(), l.end(), 1);
      if (npos == 0 || npos == static_cast<long>(l.size())) {
        r.skipped.push_back("scene:" + scene);
        continue;
      }
      r.per_scene[scene] = roc_auc(s, l);
      aucs.push_back(r.per_scene[scene]);
    }
    if (!aucs.empty()) r.scene_median = aggregate_scene_auc(aucs);
  }
  return r;
}

inline json to_json_value(const EvalResult& r) {
  json j{{"dataset_auc", r.dataset_auc}, {"per_video_auc", r.per_video}, {"skipped", r.skipped}};
  if (!r.per_scene.empty()) j["per_scene_auc"] = r.per_scene;
  if (r.scene_median) j["scene_median_auc"] = *r.scene_median;
  return j;
}

}  // namespace ddl
