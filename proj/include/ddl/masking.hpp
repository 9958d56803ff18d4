#pragma once

// Object tracks and the binary masks that localize pseudo-anomalies.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddl/rng.hpp"
#include "ddl/tensor.hpp"

namespace ddl {

// Axis-aligned pixel box, inclusive-exclusive: [x0, x1) x [y0, y1).
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  bool empty() const { return x1 <= x0 || y1 <= y0; }
  bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
  friend bool operator==(const Box&, const Box&) = default;
};

struct TrackedBox {
  int object_id = 0;
  Box box;
  friend bool operator==(const TrackedBox&, const TrackedBox&) = default;
};

class TrackedObjectSet {
 public:
  TrackedObjectSet(std::size_t height, std::size_t width, std::size_t frame_count)
      : height_(height), width_(width), frames_(frame_count) {}

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t frame_count() const { return frames_.size(); }

  const std::vector<TrackedBox>& at(std::size_t frame) const { return frames_.at(frame); }

  // Clamps the box to the frame.
  void add(std::size_t frame, int object_id, Box box) {
    expects(object_id >= 0, "negative object id");
    if (frame >= frames_.size()) frames_.resize(frame + 1);
    const int w = static_cast<int>(width_), h = static_cast<int>(height_);
    box.x0 = std::clamp(box.x0, 0, w);
    box.x1 = std::clamp(box.x1, 0, w);
    box.y0 = std::clamp(box.y0, 0, h);
    box.y1 = std::clamp(box.y1, 0, h);
    frames_[frame].push_back({object_id, box});
  }

  // Sorted ids present in at least one frame of [start, start + length).
  std::vector<int> ids_in(std::size_t start, std::size_t length) const {
    std::set<int> ids;
    for (std::size_t f = start; f < start + length && f < frames_.size(); ++f)
      for (const auto& tb : frames_[f]) ids.insert(tb.object_id);
    return {ids.begin(), ids.end()};
  }

 private:
  std::size_t height_, width_;
  std::vector<std::vector<TrackedBox>> frames_;
};

// JSONL, one {"frame", "object_id", "box": [x0, y0, x1, y1]} object per line.
// frame_count == 0 sizes the set from the largest frame index seen.
inline TrackedObjectSet load_tracks(const std::filesystem::path& path, std::size_t height, std::size_t width,
                                    std::size_t frame_count = 0) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot open track file " + path.string());
  TrackedObjectSet set(height, width, frame_count);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IngestError(where + ": malformed track line: " + e.what());
    }
    if (!j.is_object() || !j.contains("frame") || !j.contains("object_id") || !j.contains("box") ||
        !j["frame"].is_number_integer() || !j["object_id"].is_number_integer() || !j["box"].is_array() ||
        j["box"].size() != 4)
      throw IngestError(where + ": track line needs integer frame, object_id and a 4-element box");
    for (const auto& v : j["box"])
      if (!v.is_number_integer()) throw IngestError(where + ": box coordinates must be integers");
    const auto frame = j["frame"].get<long long>();
    const auto id = j["object_id"].get<long long>();
    if (frame < 0) throw IngestError(where + ": negative frame index");
    if (id < 0) throw IngestError(where + ": negative object_id");
    if (frame_count && static_cast<std::size_t>(frame) >= frame_count)
      throw IngestError(where + ": frame index beyond video length");
    const auto& b = j["box"];
    set.add(static_cast<std::size_t>(frame), static_cast<int>(id),
            Box{b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()});
  }
  return set;
}

struct MaskSequence {
  Tensor<std::uint8_t> mask;     // (c, T, H, W), entries 0/1, identical across c
  std::optional<int> object_id;  // nullopt for the full-frame fallback

  template <typename S>
  Tensor<S> as() const {
    return mask.cast<S>();
  }
  std::size_t support() const {
    std::size_t n = 0;
    for (auto v : mask.values()) n += v;
    return n;
  }
};

inline MaskSequence full_frame_fallback(const Shape& shape) {
  expects(shape.size() == 4 && numel(shape) > 0, "full_frame_fallback: shape must be (c, T, H, W)");
  return {Tensor<std::uint8_t>(shape, 1), std::nullopt};
}

// Rasterizes one object's boxes over a window; frames where it is untracked stay zero.
inline MaskSequence rasterize_object(const TrackedObjectSet& tracks, int object_id, std::size_t start,
                                     std::size_t frames, std::size_t channels) {
  const std::size_t H = tracks.height(), W = tracks.width();
  MaskSequence m{Tensor<std::uint8_t>({channels, frames, H, W}), object_id};
  for (std::size_t t = 0; t < frames; ++t) {
    if (start + t >= tracks.frame_count()) continue;
    for (const auto& tb : tracks.at(start + t)) {
      if (tb.object_id != object_id) continue;
      for (std::size_t c = 0; c < channels; ++c)
        for (int y = tb.box.y0; y < tb.box.y1; ++y)
          for (int x = tb.box.x0; x < tb.box.x1; ++x)
            m.mask(c, t, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = 1;
    }
  }
  return m;
}

// Picks one object uniformly among those tracked anywhere in the window and
// masks its boxes in every frame; falls back to a full-frame mask when the
// window holds no objects (no draw is consumed in that case).
inline MaskSequence random_object_mask(const TrackedObjectSet& tracks, std::size_t start, std::size_t frames,
                                       std::size_t channels, Rng& rng) {
  expects(frames > 0 && channels > 0, "random_object_mask: empty window");
  expects(start + frames <= tracks.frame_count(), "random_object_mask: window outside track range");
  const auto ids = tracks.ids_in(start, frames);
  if (ids.empty()) return full_frame_fallback({channels, frames, tracks.height(), tracks.width()});
  const int chosen = ids[rng.below(ids.size())];
  return rasterize_object(tracks, chosen, start, frames, channels);
}

}  // namespace ddl
