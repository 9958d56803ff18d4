#pragma once

// Run configuration files: one JSON object with optional sections
// "synth", "model", "loss", "train" and "score". Unknown keys anywhere are
// rejected. The resolved configuration is echoed as run_config.json and can be
// fed back unchanged to reproduce a run.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "ddl/json_util.hpp"
#include "ddl/losses.hpp"
#include "ddl/model.hpp"
#include "ddl/synth.hpp"

namespace ddl {

enum class TrainMode { kDDL, kSDL, kNone };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::kDDL: return "ddl";
    case TrainMode::kSDL: return "sdl";
    case TrainMode::kNone: return "none";
  }
  return "ddl";
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "ddl" || s == "DDL") return TrainMode::kDDL;
  if (s == "sdl" || s == "SDL") return TrainMode::kSDL;
  if (s == "none" || s == "NONE") return TrainMode::kNone;
  throw ConfigError("unknown training mode '" + s + "' (expected ddl, sdl or none)");
}

inline ModelVariant parse_variant(const std::string& s) {
  if (s == "C3DSU" || s == "c3dsu") return ModelVariant::kC3DSU;
  if (s == "UNET_BASELINE" || s == "unet" || s == "UNET") return ModelVariant::kUNetBaseline;
  throw ConfigError("unknown model variant '" + s + "' (expected C3DSU or UNET_BASELINE)");
}

struct ScoreConfig {
  std::size_t patch = 16;
  std::size_t median = 17;
  bool normalize = true;
  std::size_t batch = 8;

  void validate() const {
    if (patch < 1) throw ConfigError("score.patch must be >= 1");
    if (median < 1 || median % 2 == 0) throw ConfigError("score.median must be a positive odd window");
    if (batch < 1) throw ConfigError("score.batch must be >= 1");
  }
};

struct TrainConfig {
  TrainMode mode = TrainMode::kDDL;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  double learning_rate = 1e-4;
  std::optional<double> ell_learning_rate;  // defaults to learning_rate
  std::uint64_t seed = 7;
  std::size_t frames = 3;  // T
  LossConfig loss;
  ModelConfig model;
  std::string data;  // dataset root or manifest path
  std::string out;
  bool model_seed_explicit = false;  // otherwise the model is seeded from `seed`

  double ell_lr() const { return ell_learning_rate.value_or(learning_rate); }

  // Frame count the model actually consumes.
  std::size_t model_frames() const { return model.variant == ModelVariant::kUNetBaseline ? 1 : frames; }

  ModelConfig resolved_model(std::size_t in_channels) const {
    ModelConfig m = model;
    m.in_channels = in_channels;
    m.frames = model_frames();
    if (!model_seed_explicit) m.seed = seed;
    return m;
  }

  void validate() const {
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train.learning_rate must be > 0");
    if (ell_learning_rate && !(*ell_learning_rate > 0.0)) throw ConfigError("train.ell_learning_rate must be > 0");
    if (frames % 2 == 0) throw ConfigError("train.T must be odd");
    try {
      loss.validate();
      ModelConfig m = model;
      m.frames = model_frames();
      m.validate();
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
  }
};

struct RunConfig {
  SynthConfig synth;
  TrainConfig train;
  ScoreConfig score;
};

inline json to_json_value(const TrainConfig& t) {
  json j{{"mode", to_string(t.mode)},
         {"epochs", t.epochs},
         {"batch_size", t.batch_size},
         {"learning_rate", t.learning_rate},
         {"ell_learning_rate", t.ell_lr()},
         {"seed", t.seed},
         {"T", t.frames},
         {"data", t.data},
         {"out", t.out}};
  return j;
}

inline json to_json_value(const ModelConfig& m) {
  return json{{"variant", to_string(m.variant)},
              {"in_channels", m.in_channels},
              {"frames", m.frames},
              {"base_channels", m.base_channels},
              {"depth", m.depth},
              {"seed", m.seed}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  SectionReader r(j, "model");
  std::string variant = to_string(m.variant);
  r.get("variant", variant);
  m.variant = parse_variant(variant);
  r.get("in_channels", m.in_channels);
  r.get("frames", m.frames);
  r.get("base_channels", m.base_channels);
  r.get("depth", m.depth);
  r.get("seed", m.seed);
  r.finish();
  return m;
}

inline json to_json_value(const RunConfig& c) {
  return json{{"synth", json(c.synth)},
              {"model", to_json_value(c.train.model)},
              {"loss", {{"lambda", c.train.loss.lambda}, {"epsilon", c.train.loss.epsilon}}},
              {"train", to_json_value(c.train)},
              {"score",
               {{"patch", c.score.patch}, {"median", c.score.median}, {"normalize", c.score.normalize}, {"batch", c.score.batch}}}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  SectionReader top(j, "");
  if (top.has("synth")) c.synth = synth_config_from_json(top.sub("synth"));
  bool model_seed_given = false;
  if (top.has("model")) {
    model_seed_given = top.sub("model").contains("seed");
    c.train.model = model_config_from_json(top.sub("model"));
  }
  if (top.has("loss")) {
    SectionReader r(top.sub("loss"), "loss");
    r.get("lambda", c.train.loss.lambda);
    r.get("epsilon", c.train.loss.epsilon);
    r.finish();
  }
  if (top.has("train")) {
    SectionReader r(top.sub("train"), "train");
    std::string mode = to_string(c.train.mode);
    r.get("mode", mode);
    c.train.mode = parse_mode(mode);
    r.get("epochs", c.train.epochs);
    r.get("batch_size", c.train.batch_size);
    r.get("learning_rate", c.train.learning_rate);
    double ell_lr = 0.0;
    r.get("ell_learning_rate", ell_lr);
    if (top.sub("train").contains("ell_learning_rate")) c.train.ell_learning_rate = ell_lr;
    r.get("seed", c.train.seed);
    r.get("T", c.train.frames);
    r.get("data", c.train.data);
    r.get("out", c.train.out);
    r.finish();
  }
  if (top.has("score")) {
    SectionReader r(top.sub("score"), "score");
    r.get("patch", c.score.patch);
    r.get("median", c.score.median);
    r.get("normalize", c.score.normalize);
    r.get("batch", c.score.batch);
    r.finish();
  }
  top.finish();
  c.train.model_seed_explicit = model_seed_given;
  c.train.model.frames = c.train.model_frames();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config file " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace ddl
