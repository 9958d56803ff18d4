#pragma once

// Deterministic synthetic surveillance corpus: bright disks drifting over a
// static scene with constant velocities and elastic wall bounces. Test videos
// carry labelled anomaly events of two kinds: a square sprite entering the
// scene (unseen shape) or a disk moving four times faster (unusual motion,
// rendered with the corresponding exposure blur). Per-frame boxes of every
// sprite are written as tracks.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "ddl/clipio.hpp"
#include "ddl/masking.hpp"
#include "ddl/rng.hpp"

namespace ddl {

// Normal frames kept on each side of an anomaly event.
inline constexpr std::size_t kEventMargin = 8;

struct SynthConfig {
  std::size_t height = 64, width = 64, channels = 1;
  std::size_t train_videos = 4, test_videos = 4;
  std::size_t frames_per_video = 96;
  std::size_t sprites = 3;
  double radius_min = 4.0, radius_max = 6.0;
  double speed_min = 0.75, speed_max = 1.5;  // pixels per frame
  double anomaly_speed_factor = 4.0;
  std::size_t events_per_video = 1;
  std::size_t event_length_min = 24, event_length_max = 36;
  double anomaly_fraction_min = 0.1, anomaly_fraction_max = 0.4;
  std::size_t blur_samples = 5;

  void validate() const {
    expects(height >= 16 && width >= 16, "synth: frames must be at least 16x16");
    expects(channels == 1 || channels == 3, "synth: channels must be 1 or 3");
    expects(sprites > 0, "synth: at least one sprite is required");
    expects(frames_per_video >= 3, "synth: need at least 3 frames per video");
    expects(radius_min > 0 && radius_max >= radius_min, "synth: invalid radius range");
    expects(2 * radius_max + 2 < static_cast<double>(std::min(height, width)), "synth: sprites too large");
    expects(speed_min > 0 && speed_max >= speed_min, "synth: invalid speed range");
    expects(anomaly_speed_factor > 1.0, "synth: anomaly speed factor must exceed 1");
    expects(blur_samples >= 1, "synth: blur_samples must be >= 1");
    expects(event_length_min >= 1 && event_length_max >= event_length_min, "synth: invalid event length range");
    expects(events_per_video * (event_length_max + 2 * kEventMargin) <= frames_per_video,
            "synth: events do not fit in videos");
    const double f = static_cast<double>(frames_per_video);
    expects(static_cast<double>(events_per_video * event_length_min) / f >= anomaly_fraction_min &&
                static_cast<double>(events_per_video * event_length_max) / f <= anomaly_fraction_max,
            "synth: event lengths cannot honour the anomaly fraction range");
  }
};

inline void to_json(json& j, const SynthConfig& c) {
  j = json{{"height", c.height},
           {"width", c.width},
           {"channels", c.channels},
           {"train_videos", c.train_videos},
           {"test_videos", c.test_videos},
           {"frames_per_video", c.frames_per_video},
           {"sprites", c.sprites},
           {"radius_min", c.radius_min},
           {"radius_max", c.radius_max},
           {"speed_min", c.speed_min},
           {"speed_max", c.speed_max},
           {"anomaly_speed_factor", c.anomaly_speed_factor},
           {"events_per_video", c.events_per_video},
           {"event_length_min", c.event_length_min},
           {"event_length_max", c.event_length_max},
           {"anomaly_fraction_min", c.anomaly_fraction_min},
           {"anomaly_fraction_max", c.anomaly_fraction_max},
           {"blur_samples", c.blur_samples}};
}

inline SynthConfig synth_config_from_json(const json& j, const std::string& section = "synth") {
  SynthConfig c;
  SectionReader r(j, section);
  r.get("height", c.height);
  r.get("width", c.width);
  r.get("channels", c.channels);
  r.get("train_videos", c.train_videos);
  r.get("test_videos", c.test_videos);
  r.get("frames_per_video", c.frames_per_video);
  r.get("sprites", c.sprites);
  r.get("radius_min", c.radius_min);
  r.get("radius_max", c.radius_max);
  r.get("speed_min", c.speed_min);
  r.get("speed_max", c.speed_max);
  r.get("anomaly_speed_factor", c.anomaly_speed_factor);
  r.get("events_per_video", c.events_per_video);
  r.get("event_length_min", c.event_length_min);
  r.get("event_length_max", c.event_length_max);
  r.get("anomaly_fraction_min", c.anomaly_fraction_min);
  r.get("anomaly_fraction_max", c.anomaly_fraction_max);
  r.get("blur_samples", c.blur_samples);
  r.finish();
  return c;
}

namespace synth_detail {

enum class Shape { kDisk, kSquare };

struct Sprite {
  int id;
  Shape shape;
  double x, y, vx, vy, radius, intensity;
};

struct Event {
  std::size_t start, length;
  bool square;  // else: speed-up of one disk
  std::size_t target;
};

// Static scene shared by every video of a corpus.
inline std::vector<float> make_background(const SynthConfig& cfg, Rng& rng) {
  const std::size_t H = cfg.height, W = cfg.width;
  std::vector<float> bg(H * W);
  const double gx = rng.uniform(-0.08, 0.08), gy = rng.uniform(-0.08, 0.08);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      bg[y * W + x] = static_cast<float>(0.22 + gx * (static_cast<double>(x) / W - 0.5) + gy * (static_cast<double>(y) / H - 0.5));
  for (int k = 0; k < 3; ++k) {
    const auto x0 = static_cast<std::size_t>(rng.uniform(0.0, 0.8) * W);
    const auto y0 = static_cast<std::size_t>(rng.uniform(0.0, 0.8) * H);
    const auto w = static_cast<std::size_t>(rng.uniform(0.1, 0.25) * W);
    const auto h = static_cast<std::size_t>(rng.uniform(0.05, 0.15) * H);
    const float level = static_cast<float>(rng.uniform(0.08, 0.4));
    for (std::size_t y = y0; y < std::min(H, y0 + h); ++y)
      for (std::size_t x = x0; x < std::min(W, x0 + w); ++x) bg[y * W + x] = level;
  }
  return bg;
}

inline double coverage(const Sprite& s, double cx, double cy, double px, double py) {
  const double dx = px - cx, dy = py - cy;
  const double d = s.shape == Shape::kDisk ? std::sqrt(dx * dx + dy * dy) : std::max(std::abs(dx), std::abs(dy));
  return std::clamp(s.radius - d + 0.5, 0.0, 1.0);
}

// Composites a sprite whose exposure spans displacement (dx, dy) around (x, y).
inline Box render(std::vector<float>& img, std::size_t H, std::size_t W, const Sprite& s, double dx, double dy,
                  std::size_t samples) {
  const double ext = s.radius + 1.0;
  const double minx = s.x - std::abs(dx) / 2 - ext, maxx = s.x + std::abs(dx) / 2 + ext;
  const double miny = s.y - std::abs(dy) / 2 - ext, maxy = s.y + std::abs(dy) / 2 + ext;
  const Box box{static_cast<int>(std::floor(minx)), static_cast<int>(std::floor(miny)),
                static_cast<int>(std::ceil(maxx)), static_cast<int>(std::ceil(maxy))};
  const int x0 = std::max(box.x0, 0), x1 = std::min(box.x1, static_cast<int>(W));
  const int y0 = std::max(box.y0, 0), y1 = std::min(box.y1, static_cast<int>(H));
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      double a = 0.0;
      for (std::size_t k = 0; k < samples; ++k) {
        const double t = samples == 1 ? 0.0 : static_cast<double>(k) / static_cast<double>(samples - 1) - 0.5;
        a += coverage(s, s.x + t * dx, s.y + t * dy, x + 0.5, y + 0.5);
      }
      a /= static_cast<double>(samples);
      float& p = img[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
      p = static_cast<float>(p * (1.0 - a) + s.intensity * a);
    }
  return box;
}

inline void advance(Sprite& s, double factor, std::size_t H, std::size_t W) {
  s.x += s.vx * factor;
  s.y += s.vy * factor;
  const double r = s.radius, w = static_cast<double>(W), h = static_cast<double>(H);
  if (s.x < r) s.x = 2 * r - s.x, s.vx = std::abs(s.vx);
  if (s.x > w - r) s.x = 2 * (w - r) - s.x, s.vx = -std::abs(s.vx);
  if (s.y < r) s.y = 2 * r - s.y, s.vy = std::abs(s.vy);
  if (s.y > h - r) s.y = 2 * (h - r) - s.y, s.vy = -std::abs(s.vy);
}

inline Sprite spawn(const SynthConfig& cfg, Rng& rng, int id, Shape shape) {
  Sprite s{id, shape, 0, 0, 0, 0, rng.uniform(cfg.radius_min, cfg.radius_max), rng.uniform(0.75, 0.95)};
  s.x = rng.uniform(s.radius, static_cast<double>(cfg.width) - s.radius);
  s.y = rng.uniform(s.radius, static_cast<double>(cfg.height) - s.radius);
  const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  const double speed = rng.uniform(cfg.speed_min, cfg.speed_max);
  s.vx = speed * std::cos(angle);
  s.vy = speed * std::sin(angle);
  return s;
}

inline std::vector<Event> plan_events(const SynthConfig& cfg, Rng& rng, std::size_t video_index) {
  std::vector<Event> events;
  const std::size_t F = cfg.frames_per_video, E = cfg.events_per_video;
  const std::size_t slot = F / E;
  for (std::size_t e = 0; e < E; ++e) {
    const std::size_t len = cfg.event_length_min + rng.below(cfg.event_length_max - cfg.event_length_min + 1);
    const std::size_t lo = e * slot + kEventMargin, hi = (e + 1) * slot - len - kEventMargin;
    const std::size_t start = lo + (hi > lo ? rng.below(hi - lo + 1) : 0);
    events.push_back({start, len, (video_index + e) % 2 == 0, rng.below(cfg.sprites)});
  }
  return events;
}

struct RenderedVideo {
  std::vector<std::vector<float>> frames;  // per frame, (H, W) luminance
  std::vector<std::uint8_t> labels;
  std::vector<std::vector<TrackedBox>> tracks;
};

inline RenderedVideo render_video(const SynthConfig& cfg, const std::vector<float>& background, Rng& rng,
                                  std::size_t video_index, bool with_anomalies) {
  const std::size_t H = cfg.height, W = cfg.width, F = cfg.frames_per_video;
  std::vector<Sprite> sprites;
  for (std::size_t i = 0; i < cfg.sprites; ++i) sprites.push_back(spawn(cfg, rng, static_cast<int>(i), Shape::kDisk));
  const auto events = with_anomalies ? plan_events(cfg, rng, video_index) : std::vector<Event>{};
  std::vector<std::optional<Sprite>> squares(events.size());
  for (std::size_t e = 0; e < events.size(); ++e)
    if (events[e].square) squares[e] = spawn(cfg, rng, static_cast<int>(cfg.sprites + e), Shape::kSquare);

  RenderedVideo v;
  v.labels.assign(F, 0);
  v.tracks.resize(F);
  for (std::size_t f = 0; f < F; ++f) {
    std::vector<float> img = background;
    std::vector<double> factor(sprites.size(), 1.0);
    for (std::size_t e = 0; e < events.size(); ++e) {
      const auto& ev = events[e];
      if (f < ev.start || f >= ev.start + ev.length) continue;
      v.labels[f] = 1;
      if (!ev.square) factor[ev.target] = cfg.anomaly_speed_factor;
    }
    for (std::size_t i = 0; i < sprites.size(); ++i) {
      const auto& s = sprites[i];
      const Box b = render(img, H, W, s, s.vx * factor[i], s.vy * factor[i], cfg.blur_samples);
      v.tracks[f].push_back({s.id, b});
    }
    for (std::size_t e = 0; e < events.size(); ++e) {
      if (!squares[e] || f < events[e].start || f >= events[e].start + events[e].length) continue;
      auto& sq = *squares[e];
      const Box b = render(img, H, W, sq, sq.vx, sq.vy, cfg.blur_samples);
      v.tracks[f].push_back({sq.id, b});
      advance(sq, 1.0, H, W);
    }
    for (std::size_t i = 0; i < sprites.size(); ++i) advance(sprites[i], factor[i], H, W);
    v.frames.push_back(std::move(img));
  }
  return v;
}

inline std::string frame_name(std::size_t f) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.png", f);
  return buf;
}

}  // namespace synth_detail

// Writes <root>/<split>/<id>/{frames/%06d.png, labels.txt, tracks.jsonl} and
// <root>/manifest.json. Output is a pure function of (cfg, seed).
inline DatasetManifest synth_dataset(const SynthConfig& cfg, std::uint64_t seed, const fs::path& root) {
  using namespace synth_detail;
  cfg.validate();
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec || !fs::is_directory(root)) throw IoError("cannot create dataset root " + root.string());

  DatasetManifest m;
  m.root = root;
  m.height = cfg.height;
  m.width = cfg.width;
  m.channels = cfg.channels;
  m.seed = seed;
  m.generator = cfg;

  Rng scene_rng = Rng::stream(seed, 1);
  const auto background = make_background(cfg, scene_rng);

  const std::size_t P = cfg.height * cfg.width;
  for (int split = 0; split < 2; ++split) {
    const bool test = split == 1;
    const std::string split_name = test ? "test" : "train";
    const std::size_t count = test ? cfg.test_videos : cfg.train_videos;
    for (std::size_t vi = 0; vi < count; ++vi) {
      char idbuf[32];
      std::snprintf(idbuf, sizeof idbuf, "%02zu", vi);
      const std::string id = idbuf;
      Rng rng = Rng::stream(seed, 1000 + static_cast<std::uint64_t>(split) * 100000 + vi);
      const auto video = render_video(cfg, background, rng, vi, test);

      const std::string rel = split_name + "/" + id;
      const fs::path dir = root / rel;
      fs::create_directories(dir / "frames", ec);
      if (ec) throw IoError("cannot create " + (dir / "frames").string());
      for (std::size_t f = 0; f < video.frames.size(); ++f) {
        Image8 img(cfg.width, cfg.height, cfg.channels);
        for (std::size_t i = 0; i < P; ++i)
          for (std::size_t c = 0; c < cfg.channels; ++c) img.pixels[i * cfg.channels + c] = to_byte(video.frames[f][i]);
        write_png(dir / "frames" / frame_name(f), img);
      }
      write_labels(dir / "labels.txt", video.labels);
      std::ofstream tracks(dir / "tracks.jsonl");
      if (!tracks) throw IoError("cannot write " + (dir / "tracks.jsonl").string());
      for (std::size_t f = 0; f < video.tracks.size(); ++f)
        for (const auto& tb : video.tracks[f])
          tracks << json{{"frame", f}, {"object_id", tb.object_id}, {"box", {tb.box.x0, tb.box.y0, tb.box.x1, tb.box.y1}}}.dump()
                 << '\n';
      if (!tracks) throw IoError("short write to " + (dir / "tracks.jsonl").string());

      VideoEntry e{id, cfg.frames_per_video, rel + "/frames", rel + "/labels.txt", rel + "/tracks.jsonl", ""};
      (test ? m.test : m.train).push_back(std::move(e));
    }
  }
  save_manifest(m);
  return m;
}

}  // namespace ddl
