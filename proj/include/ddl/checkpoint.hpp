#pragma once

// Binary container shared by model checkpoints and resumable training state.
//
//   offset 0   8 bytes   magic "DDLVADCK"
//   offset 8   u32 LE    container version (kContainerVersion)
//   offset 12  u64 LE    header length L
//   offset 20  L bytes   UTF-8 JSON header
//   ...        payload   raw little-endian tensor data, back to back
//   end        u64 LE    FNV-1a 64 over header and payload
//
// The header carries "kind", "version" (checkpoint format version),
// "scalar" ("f32" or "f64"), "config" (the model configuration), an optional
// "ell" (anomaly logit, stored as a JSON double with round-trip precision) and
// "tensors": [{"name", "shape", "offset", "count"}] with byte offsets into the
// payload. Model parameters are named by block path, e.g.
// "enc0.heads.head2.weight", "skip1.weight", "dec3.bn2.running_var".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "ddl/config.hpp"
#include "ddl/json_util.hpp"
#include "ddl/model.hpp"

namespace ddl {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kContainerMagic[8] = {'D', 'D', 'L', 'V', 'A', 'D', 'C', 'K'};
inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr int kCheckpointVersion = 1;

template <typename S>
constexpr const char* scalar_tag() {
  if constexpr (std::is_same_v<S, float>) return "f32";
  else return "f64";
}

inline std::uint64_t fnv1a(const char* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

class ContainerWriter {
 public:
  template <typename S>
  void add(const std::string& name, const Tensor<S>& t) {
    const std::size_t bytes = t.size() * sizeof(S);
    index_.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload_.size()}, {"count", t.size()},
                      {"scalar", scalar_tag<S>()}});
    const auto* p = reinterpret_cast<const char*>(t.data());
    payload_.insert(payload_.end(), p, p + bytes);
  }

  void write(const std::filesystem::path& path, json header) const {
    header["tensors"] = index_;
    const std::string h = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    const std::uint32_t version = kContainerVersion;
    const std::uint64_t hlen = h.size();
    std::uint64_t sum = fnv1a(h.data(), h.size());
    sum = fnv1a(payload_.data(), payload_.size(), sum);
    out.write(kContainerMagic, 8);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&hlen), sizeof hlen);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(payload_.data(), static_cast<std::streamsize>(payload_.size()));
    out.write(reinterpret_cast<const char*>(&sum), sizeof sum);
    if (!out) throw IoError("short write to " + path.string());
  }

 private:
  json index_ = json::array();
  std::vector<char> payload_;
};

class ContainerReader {
 public:
  explicit ContainerReader(const std::filesystem::path& path) : path_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open " + path_);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    constexpr std::size_t kFixed = 8 + 4 + 8;
    if (bytes.size() < kFixed + 8 || std::memcmp(bytes.data(), kContainerMagic, 8) != 0)
      throw IngestError(path_ + ": not a checkpoint file");
    std::uint32_t version;
    std::uint64_t hlen;
    std::memcpy(&version, bytes.data() + 8, 4);
    std::memcpy(&hlen, bytes.data() + 12, 8);
    if (version != kContainerVersion)
      throw IngestError(path_ + ": container version " + std::to_string(version) + " is not supported");
    if (hlen > bytes.size() - kFixed - 8) throw IngestError(path_ + ": truncated header");
    std::uint64_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
    if (fnv1a(bytes.data() + kFixed, bytes.size() - kFixed - 8) != stored)
      throw IngestError(path_ + ": checksum mismatch (corrupt file)");
    try {
      header_ = json::parse(bytes.begin() + kFixed, bytes.begin() + kFixed + static_cast<long>(hlen));
    } catch (const json::exception& e) {
      throw IngestError(path_ + ": corrupt header: " + e.what());
    }
    payload_.assign(bytes.begin() + kFixed + static_cast<long>(hlen), bytes.end() - 8);
    for (const auto& t : header_.value("tensors", json::array())) index_[t.at("name").get<std::string>()] = t;
  }

  const json& header() const { return header_; }
  bool has(const std::string& name) const { return index_.count(name) > 0; }

  template <typename S>
  Tensor<S> tensor(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IngestError(path_ + ": missing tensor " + name);
    const json& e = it->second;
    const auto shape = e.at("shape").get<Shape>();
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = e.at("count").get<std::size_t>();
    const std::string tag = e.at("scalar").get<std::string>();
    if (count != numel(shape)) throw IngestError(path_ + ": tensor " + name + " has inconsistent size");
    if (tag == "f32") return read_as<float, S>(shape, offset, count, name);
    if (tag == "f64") return read_as<double, S>(shape, offset, count, name);
    throw IngestError(path_ + ": tensor " + name + " has unknown scalar type " + tag);
  }

 private:
  template <typename F, typename S>
  Tensor<S> read_as(const Shape& shape, std::size_t offset, std::size_t count, const std::string& name) const {
    if (offset + count * sizeof(F) > payload_.size()) throw IngestError(path_ + ": tensor " + name + " out of range");
    std::vector<F> raw(count);
    std::memcpy(raw.data(), payload_.data() + offset, count * sizeof(F));
    return Tensor<F>(shape, std::move(raw)).template cast<S>();
  }

  std::string path_;
  json header_;
  std::vector<char> payload_;
  std::map<std::string, json> index_;
};

template <typename S>
void add_model(ContainerWriter& w, TemporalSkipUNet<S>& model) {
  model.visit([&](const nn::Param<S>& p) { w.add(p.name, p.value); });
  model.visit_buffers([&](const std::string& name, const Tensor<S>& t) { w.add(name, t); });
}

template <typename S>
void read_model(const ContainerReader& r, TemporalSkipUNet<S>& model) {
  model.visit([&](nn::Param<S>& p) {
    Tensor<S> t = r.template tensor<S>(p.name);
    if (t.shape() != p.value.shape()) throw IngestError("checkpoint tensor " + p.name + " has the wrong shape");
    p.value = std::move(t);
  });
  model.visit_buffers([&](const std::string& name, Tensor<S>& buf) {
    Tensor<S> t = r.template tensor<S>(name);
    if (t.shape() != buf.shape()) throw IngestError("checkpoint tensor " + name + " has the wrong shape");
    buf = std::move(t);
  });
}

inline ModelConfig checkpoint_model_config(const ContainerReader& r, const std::string& what) {
  const json& h = r.header();
  if (!h.contains("version") || h["version"] != kCheckpointVersion)
    throw IngestError(what + ": checkpoint version tag mismatch (expected " + std::to_string(kCheckpointVersion) + ")");
  try {
    return model_config_from_json(h.at("config"));
  } catch (const std::exception& e) {
    throw IngestError(what + ": bad model config in checkpoint: " + e.what());
  }
}

template <typename S>
void save_checkpoint(const std::filesystem::path& path, TemporalSkipUNet<S>& model, std::optional<double> ell = {},
                     const json& extra = json::object()) {
  ContainerWriter w;
  add_model(w, model);
  json header = extra;
  header["kind"] = "model";
  header["version"] = kCheckpointVersion;
  header["scalar"] = scalar_tag<S>();
  header["config"] = to_json_value(model.config());
  if (ell) header["ell"] = *ell;
  w.write(path, std::move(header));
}

template <typename S>
struct LoadedCheckpoint {
  TemporalSkipUNet<S> model;
  std::optional<double> ell;
  json header;
};

template <typename S = float>
LoadedCheckpoint<S> load_checkpoint(const std::filesystem::path& path) {
  ContainerReader r(path);
  TemporalSkipUNet<S> model(checkpoint_model_config(r, path.string()));
  read_model(r, model);
  std::optional<double> ell;
  if (r.header().contains("ell")) ell = r.header()["ell"].get<double>();
  return {std::move(model), ell, r.header()};
}

}  // namespace ddl
