#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "eeg4d/binary_io.hpp"
#include "eeg4d/diff/tensor.hpp"

namespace eeg4d::diff {

enum class Init { zeros, constant, he_uniform, xavier_uniform };

inline const char* init_name(Init i) {
  switch (i) {
    case Init::zeros: return "zeros";
    case Init::constant: return "constant";
    case Init::he_uniform: return "he_uniform";
    case Init::xavier_uniform: return "xavier_uniform";
  }
  return "?";
}

struct InitSpec {
  Init kind = Init::zeros;
  int fan_in = 0;
  int fan_out = 0;
  double value = 0.0;  // Init::constant only
};

// Named trainable tensors in insertion order.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
    InitSpec init;
  };

  Var<T>& add(const std::string& name, Shape shape, InitSpec init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Var<T>::parameter(shape, std::vector<T>(shape_size(shape), T(0))), init});
    return entries_.back().var;
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Var<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return entries_[it->second].var;
  }
  const Var<T>& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.var.size();
    return n;
  }

  // Draws every tensor from its InitSpec, in insertion order.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& e : entries_) {
      auto& v = e.var.value();
      const InitSpec& s = e.init;
      double limit = 0.0;
      switch (s.kind) {
        case Init::zeros: std::fill(v.begin(), v.end(), T(0)); continue;
        case Init::constant: std::fill(v.begin(), v.end(), static_cast<T>(s.value)); continue;
        case Init::he_uniform: limit = std::sqrt(6.0 / std::max(1, s.fan_in)); break;
        case Init::xavier_uniform: limit = std::sqrt(6.0 / std::max(1, s.fan_in + s.fan_out)); break;
      }
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (auto& x : v) x = static_cast<T>(dist(rng));
    }
  }

  void zero_grad() {
    for (auto& e : entries_) e.var.zero_grad();
  }

  // Deep copy with fresh nodes. A non-trainable copy holds constants, so
  // graphs built from it never write into parameter gradients.
  ParamStore clone(bool trainable = true) const {
    ParamStore out;
    for (const auto& e : entries_) {
      out.index_[e.name] = out.entries_.size();
      auto v = trainable ? Var<T>::parameter(e.var.shape(), e.var.value()) : Var<T>::constant(e.var.shape(), e.var.value());
      out.entries_.push_back({e.name, v, e.init});
    }
    return out;
  }

  // Copies values from a store with the same names and shapes.
  template <class U>
  void copy_values_from(const ParamStore<U>& other) {
    for (auto& e : entries_) {
      const auto& src = other.at(e.name);
      if (src.shape() != e.var.shape()) throw ShapeError("parameter shape mismatch for " + e.name);
      std::transform(src.value().begin(), src.value().end(), e.var.value().begin(), [](U x) { return static_cast<T>(x); });
    }
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

// Checkpoint layout (little-endian):
//   "E4DK" | u32 version | u64 manifest_bytes | manifest JSON | f32 blob
// The manifest holds {"config": ..., "tensors": [{"name","shape","offset"}]},
// offsets in bytes from the start of the blob.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& params, const nlohmann::json& config) {
  nlohmann::json manifest;
  manifest["config"] = config;
  manifest["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : params.entries()) {
    manifest["tensors"].push_back({{"name", e.name}, {"shape", e.var.shape()}, {"offset", offset}, {"init", init_name(e.init.kind)}});
    offset += e.var.size() * sizeof(float);
  }
  const std::string text = manifest.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  binio::put_magic(os, "E4DK");
  binio::put_u32(os, kCheckpointVersion);
  binio::put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : params.entries()) {
    std::vector<float> f(e.var.value().begin(), e.var.value().end());
    binio::put_f32_array(os, f.data(), f.size());
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

struct CheckpointData {
  nlohmann::json config;
  std::vector<std::string> names;
  std::vector<Shape> shapes;
  std::vector<std::vector<float>> values;
};

inline CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  binio::expect_magic(is, "E4DK");
  const auto version = binio::get_u32(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto len = binio::get_u64(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw FormatError("truncated checkpoint manifest");
  auto manifest = nlohmann::json::parse(text);
  const auto blob_start = is.tellg();

  CheckpointData out;
  out.config = manifest.at("config");
  for (const auto& t : manifest.at("tensors")) {
    out.names.push_back(t.at("name").get<std::string>());
    out.shapes.push_back(t.at("shape").get<Shape>());
    std::vector<float> v(shape_size(out.shapes.back()));
    is.seekg(blob_start + static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>()));
    binio::get_f32_array(is, v.data(), v.size());
    out.values.push_back(std::move(v));
  }
  return out;
}

// Loads values into an existing store; names and shapes must match exactly.
template <class T>
void load_values(ParamStore<T>& params, const CheckpointData& ckpt) {
  if (ckpt.names.size() != params.entries().size())
    throw FormatError("checkpoint has " + std::to_string(ckpt.names.size()) + " tensors, model expects " +
                      std::to_string(params.entries().size()));
  for (std::size_t i = 0; i < ckpt.names.size(); ++i) {
    auto& var = params.at(ckpt.names[i]);
    if (var.shape() != ckpt.shapes[i]) throw FormatError("shape mismatch for " + ckpt.names[i]);
    std::transform(ckpt.values[i].begin(), ckpt.values[i].end(), var.value().begin(), [](float x) { return static_cast<T>(x); });
  }
}

}  // namespace eeg4d::diff
