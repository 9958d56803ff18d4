#pragma once

// Frame sequences, labels, dataset manifests and sliding-window extraction.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ddl/json_util.hpp"
#include "ddl/png_io.hpp"
#include "ddl/tensor.hpp"

namespace ddl {

namespace fs = std::filesystem;

struct FrameSequence {
  Tensor<float> frames;  // (c, F, H, W), values in [0, 1]
  std::string video_id;
  std::optional<double> fps;

  std::size_t channels() const { return frames.dim(0); }
  std::size_t frame_count() const { return frames.dim(1); }
  std::size_t height() const { return frames.dim(2); }
  std::size_t width() const { return frames.dim(3); }

  // (c, H, W) copy of frame f.
  Tensor<float> frame(std::size_t f) const {
    const std::size_t C = channels(), F = frame_count(), P = height() * width();
    Tensor<float> out({C, height(), width()});
    for (std::size_t c = 0; c < C; ++c) std::copy_n(frames.data() + (c * F + f) * P, P, out.data() + c * P);
    return out;
  }
};

struct ClipWindow {
  Tensor<float> data;  // (c, T, H, W)
  std::size_t center_index = 0;
  std::string video_id;

  std::size_t frames() const { return data.dim(1); }
  std::size_t start() const { return center_index - (frames() - 1) / 2; }
};

struct GroundTruthLabels {
  std::vector<std::uint8_t> labels;
  std::string video_id;
};

inline ClipWindow extract_window(const FrameSequence& seq, std::size_t start, std::size_t T) {
  const std::size_t C = seq.channels(), F = seq.frame_count(), P = seq.height() * seq.width();
  expects(start + T <= F, "window exceeds sequence");
  ClipWindow w{Tensor<float>({C, T, seq.height(), seq.width()}), start + (T - 1) / 2, seq.video_id};
  for (std::size_t c = 0; c < C; ++c)
    std::copy_n(seq.frames.data() + (c * F + start) * P, T * P, w.data.data() + c * T * P);
  return w;
}

// Stride-1 windows; window k is centered on frame k + (T - 1) / 2.
inline std::vector<ClipWindow> sliding_windows(const FrameSequence& seq, std::size_t T) {
  if (T % 2 == 0) throw ContractError("sliding_windows: window length must be odd, got " + std::to_string(T));
  if (T > seq.frame_count())
    throw ContractError("sliding_windows: window length " + std::to_string(T) + " exceeds " +
                        std::to_string(seq.frame_count()) + " frames");
  std::vector<ClipWindow> out;
  out.reserve(seq.frame_count() - T + 1);
  for (std::size_t k = 0; k + T <= seq.frame_count(); ++k) out.push_back(extract_window(seq, k, T));
  return out;
}

namespace detail {

inline float luminance(const std::uint8_t* rgb) {
  return static_cast<float>((0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]) / 255.0);
}

// Bilinear resampling with half-pixel centers; (c, H, W) plane-major.
inline std::vector<float> resize_bilinear(const std::vector<float>& src, std::size_t C, std::size_t H,
                                          std::size_t W, std::size_t Ho, std::size_t Wo) {
  std::vector<float> dst(C * Ho * Wo);
  const double sy = static_cast<double>(H) / static_cast<double>(Ho);
  const double sx = static_cast<double>(W) / static_cast<double>(Wo);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < Ho; ++y) {
      const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(H - 1));
      const auto y0 = static_cast<std::size_t>(fy);
      const std::size_t y1 = std::min(y0 + 1, H - 1);
      const double wy = fy - static_cast<double>(y0);
      for (std::size_t x = 0; x < Wo; ++x) {
        const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(W - 1));
        const auto x0 = static_cast<std::size_t>(fx);
        const std::size_t x1 = std::min(x0 + 1, W - 1);
        const double wx = fx - static_cast<double>(x0);
        const float* p = src.data() + c * H * W;
        const double v = (1 - wy) * ((1 - wx) * p[y0 * W + x0] + wx * p[y0 * W + x1]) +
                         wy * ((1 - wx) * p[y1 * W + x0] + wx * p[y1 * W + x1]);
        dst[(c * Ho + y) * Wo + x] = static_cast<float>(v);
      }
    }
  return dst;
}

// Frame planes (c, H, W) in [0, 1] from a decoded image.
inline std::vector<float> to_planes(const Image8& img, std::size_t channels) {
  const std::size_t P = img.width * img.height;
  std::vector<float> out(channels * P);
  for (std::size_t i = 0; i < P; ++i) {
    const std::uint8_t* px = img.pixels.data() + i * img.channels;
    for (std::size_t c = 0; c < channels; ++c) {
      float v;
      if (img.channels == 1)
        v = static_cast<float>(px[0] / 255.0);
      else if (channels == 1)
        v = luminance(px);
      else
        v = static_cast<float>(px[c] / 255.0);
      out[c * P + i] = v;
    }
  }
  return out;
}

inline std::optional<long long> parse_index(const fs::path& p) {
  if (p.extension() != ".png") return std::nullopt;
  const std::string stem = p.stem().string();
  if (stem.empty() || !std::all_of(stem.begin(), stem.end(), [](unsigned char ch) { return std::isdigit(ch); }))
    return std::nullopt;
  return std::stoll(stem);
}

}  // namespace detail

// Loads zero-padded, index-named PNG frames (e.g. 000001.png) in index order.
// Indices must be unique and contiguous. Channels: 1 (luminance) or 3.
inline FrameSequence load_frame_dir(const fs::path& dir, std::optional<std::pair<std::size_t, std::size_t>> target_size = {},
                                    std::size_t channels = 1, std::string video_id = {}) {
  expects(channels == 1 || channels == 3, "load_frame_dir: channels must be 1 or 3");
  if (!fs::is_directory(dir)) throw IngestError("frame directory not found: " + dir.string());
  std::map<long long, fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto idx = detail::parse_index(e.path());
    if (!idx) continue;
    if (!files.emplace(*idx, e.path()).second)
      throw IngestError("duplicate frame index " + std::to_string(*idx) + " in " + dir.string());
  }
  if (files.empty()) throw IngestError("no frames in " + dir.string());
  long long expected = files.begin()->first;
  for (const auto& [idx, path] : files) {
    if (idx != expected) throw IngestError("missing frame index " + std::to_string(expected) + " in " + dir.string());
    ++expected;
  }

  std::size_t H = 0, W = 0, Ho = 0, Wo = 0;
  std::vector<std::vector<float>> planes;
  planes.reserve(files.size());
  for (const auto& [idx, path] : files) {
    const Image8 img = read_png(path);
    if (planes.empty()) {
      H = img.height;
      W = img.width;
      Ho = target_size ? target_size->first : H;
      Wo = target_size ? target_size->second : W;
    } else if (img.height != H || img.width != W) {
      throw IngestError("frame size mismatch at " + path.string());
    }
    auto p = detail::to_planes(img, channels);
    if (Ho != H || Wo != W) p = detail::resize_bilinear(p, channels, H, W, Ho, Wo);
    planes.push_back(std::move(p));
  }

  const std::size_t F = planes.size(), P = Ho * Wo;
  FrameSequence seq{Tensor<float>({channels, F, Ho, Wo}), video_id.empty() ? dir.filename().string() : video_id, {}};
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t c = 0; c < channels; ++c)
      std::copy_n(planes[f].data() + c * P, P, seq.frames.data() + (c * F + f) * P);
  return seq;
}

// One 0/1 token per line, or a single comma-separated line.
inline GroundTruthLabels load_labels(const fs::path& path, std::size_t expected_len, std::string video_id = {}) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open label file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  std::string text = buf.str();
  std::replace(text.begin(), text.end(), ',', '\n');
  GroundTruthLabels out{{}, std::move(video_id)};
  std::istringstream lines(text);
  std::string tok;
  while (lines >> tok) {
    if (tok == "0")
      out.labels.push_back(0);
    else if (tok == "1")
      out.labels.push_back(1);
    else
      throw IngestError("invalid label token '" + tok + "' in " + path.string());
  }
  if (out.labels.size() != expected_len)
    throw IngestError("label count " + std::to_string(out.labels.size()) + " != frame count " +
                      std::to_string(expected_len) + " in " + path.string());
  return out;
}

inline void write_labels(const fs::path& path, const std::vector<std::uint8_t>& labels) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (auto l : labels) out << static_cast<int>(l) << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

struct VideoEntry {
  std::string id;
  std::size_t frames = 0;
  std::string frames_dir;  // relative to the dataset root
  std::string labels;
  std::string tracks;  // empty when no tracks are available
  std::string scene;   // optional grouping for per-scene evaluation
};

struct DatasetManifest {
  fs::path root;
  std::size_t height = 0, width = 0, channels = 1;
  std::optional<std::uint64_t> seed;
  json generator;  // synthetic generator config, if any
  std::vector<VideoEntry> train, test;

  fs::path path_of(const std::string& rel) const { return root / rel; }

  const std::vector<VideoEntry>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "test") return test;
    throw ContractError("unknown split '" + name + "'");
  }
};

inline constexpr const char* kManifestFormat = "ddl-vad-dataset/1";

inline json manifest_to_json(const DatasetManifest& m) {
  auto entries = [](const std::vector<VideoEntry>& v) {
    json arr = json::array();
    for (const auto& e : v) {
      json j{{"id", e.id}, {"frames", e.frames}, {"frames_dir", e.frames_dir}, {"labels", e.labels}};
      if (!e.tracks.empty()) j["tracks"] = e.tracks;
      if (!e.scene.empty()) j["scene"] = e.scene;
      arr.push_back(std::move(j));
    }
    return arr;
  };
  json j{{"format", kManifestFormat},
         {"height", m.height},
         {"width", m.width},
         {"channels", m.channels},
         {"splits", {{"train", entries(m.train)}, {"test", entries(m.test)}}}};
  if (m.seed) j["seed"] = *m.seed;
  if (!m.generator.is_null()) j["generator"] = m.generator;
  return j;
}

inline void save_manifest(const DatasetManifest& m) {
  std::ofstream out(m.root / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + m.root.string());
  out << manifest_to_json(m).dump(2) << '\n';
  if (!out) throw IoError("short write to manifest in " + m.root.string());
}

// Accepts either the dataset root or the manifest file itself.
inline DatasetManifest load_manifest(const fs::path& where) {
  const fs::path file = fs::is_directory(where) ? where / "manifest.json" : where;
  std::ifstream in(file);
  if (!in) throw IngestError("cannot open dataset manifest " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw IngestError("malformed manifest " + file.string() + ": " + e.what());
  }
  try {
    if (j.value("format", std::string()) != kManifestFormat)
      throw IngestError("unsupported manifest format in " + file.string());
    DatasetManifest m;
    m.root = file.parent_path();
    m.height = j.at("height").get<std::size_t>();
    m.width = j.at("width").get<std::size_t>();
    m.channels = j.at("channels").get<std::size_t>();
    if (j.contains("seed")) m.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("generator")) m.generator = j["generator"];
    auto read = [](const json& arr) {
      std::vector<VideoEntry> v;
      for (const auto& e : arr)
        v.push_back({e.at("id").get<std::string>(), e.at("frames").get<std::size_t>(),
                     e.at("frames_dir").get<std::string>(), e.at("labels").get<std::string>(),
                     e.value("tracks", std::string()), e.value("scene", std::string())});
      return v;
    };
    m.train = read(j.at("splits").at("train"));
    m.test = read(j.at("splits").at("test"));
    return m;
  } catch (const json::exception& e) {
    throw IngestError("malformed manifest " + file.string() + ": " + e.what());
  }
}

inline FrameSequence load_video_frames(const DatasetManifest& m, const VideoEntry& e) {
  auto seq = load_frame_dir(m.path_of(e.frames_dir), std::make_pair(m.height, m.width), m.channels, e.id);
  if (seq.frame_count() != e.frames)
    throw IngestError("video " + e.id + ": manifest lists " + std::to_string(e.frames) + " frames, found " +
                      std::to_string(seq.frame_count()));
  return seq;
}

}  // namespace ddl
