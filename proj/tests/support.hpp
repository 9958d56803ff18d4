#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "ddl/ddl.hpp"

namespace testing {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("ddl_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    if (!std::getenv("DDL_KEEP_TEMP")) fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  fs::path path_;
};

inline ddl::ModelConfig tiny_model(ddl::ModelVariant v = ddl::ModelVariant::kC3DSU, std::size_t frames = 3) {
  ddl::ModelConfig m;
  m.variant = v;
  m.in_channels = 1;
  m.frames = v == ddl::ModelVariant::kUNetBaseline ? 1 : frames;
  m.base_channels = 4;
  m.depth = 2;
  m.seed = 3;
  return m;
}

template <typename S>
ddl::Tensor<S> uniform_tensor(const ddl::Shape& shape, ddl::Rng& rng, double lo = 0.0, double hi = 1.0) {
  ddl::Tensor<S> t(shape);
  for (auto& v : t.values()) v = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

// Axis-aligned box mask replicated over channels and frames.
template <typename S>
ddl::Tensor<S> box_mask(const ddl::Shape& shape, std::size_t y0, std::size_t y1, std::size_t x0, std::size_t x1) {
  ddl::Tensor<S> m(shape);
  const std::size_t H = shape[shape.size() - 2], W = shape[shape.size() - 1];
  const std::size_t planes = m.size() / (H * W);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = y0; y < y1; ++y)
      for (std::size_t x = x0; x < x1; ++x) m[p * H * W + y * W + x] = S(1);
  return m;
}

// Small synthetic corpus that trains in seconds.
inline ddl::SynthConfig tiny_synth() {
  ddl::SynthConfig s;
  s.height = 32;
  s.width = 32;
  s.train_videos = 2;
  s.test_videos = 2;
  s.frames_per_video = 48;
  s.sprites = 2;
  s.radius_min = 3.0;
  s.radius_max = 4.0;
  s.event_length_min = 8;
  s.event_length_max = 12;
  s.anomaly_fraction_min = 0.1;
  s.anomaly_fraction_max = 0.4;
  return s;
}

inline ddl::RunConfig tiny_run(const fs::path& data, const fs::path& out, ddl::TrainMode mode) {
  ddl::RunConfig rc;
  rc.synth = tiny_synth();
  rc.train.mode = mode;
  rc.train.epochs = 2;
  rc.train.batch_size = 4;
  rc.train.learning_rate = 1e-3;
  rc.train.data = data.string();
  rc.train.out = out.string();
  rc.train.model = tiny_model();
  rc.score.batch = 8;
  return rc;
}

}  // namespace testing
