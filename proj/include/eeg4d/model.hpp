#pragma once

// Attention CNN per temporal slice -> bidirectional LSTM -> temporal
// attention -> softmax classifier.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "eeg4d/diff/ops.hpp"
#include "eeg4d/diff/params.hpp"
#include "eeg4d/repr4d.hpp"

namespace eeg4d {

struct AttentionFlags {
  bool spectral = true;
  bool spatial = true;
  bool temporal = true;

  bool operator==(const AttentionFlags&) const = default;
  std::string label() const {
    if (spectral && spatial && temporal) return "all-on";
    if (!spectral && !spatial && !temporal) return "all-off";
    std::string s;
    if (!spectral) s += "-spectral";
    if (!spatial) s += "-spatial";
    if (!temporal) s += "-temporal";
    return s;
  }
};

struct ModelConfig {
  int grid_h = 19;
  int grid_w = 19;
  int spectral_depth = 10;
  int slices = 6;
  std::vector<int> conv_channels{64, 128, 256, 64};
  std::vector<int> conv_kernels{5, 5, 5, 3};
  int fc_cnn = 150;
  int lstm_units = 36;
  int temporal_hidden = 32;
  int classes = 3;
  AttentionFlags flags;
  int reduction = 8;
  int spatial_kernel = 7;

  static ModelConfig full() { return {}; }

  // Small configuration for finite-difference checks.
  static ModelConfig tiny() {
    ModelConfig c;
    c.grid_h = c.grid_w = 5;
    c.spectral_depth = 10;
    c.slices = 2;
    c.conv_channels = {4, 4, 4, 4};
    c.fc_cnn = 16;
    c.lstm_units = 4;
    c.temporal_hidden = 8;
    return c;
  }

  // Full 19x19 grid with narrow layers; fast enough for sweeps on a laptop.
  static ModelConfig small() {
    ModelConfig c;
    c.conv_channels = {8, 8, 8, 8};
    c.fc_cnn = 32;
    c.lstm_units = 8;
    c.temporal_hidden = 16;
    return c;
  }

  static ModelConfig preset(const std::string& name) {
    if (name == "full") return full();
    if (name == "small") return small();
    if (name == "tiny") return tiny();
    throw std::invalid_argument("unknown model preset '" + name + "' (full, small, tiny)");
  }

  // Hidden width of the spectral-attention bottleneck for c channels.
  int attention_hidden(int channels) const { return std::max(channels / reduction, std::min(4, channels)); }
  int pooled_h() const { return grid_h / 2; }
  int pooled_w() const { return grid_w / 2; }
  int flat_size() const { return pooled_h() * pooled_w() * conv_channels.back(); }

  void validate() const {
    auto pos = [](int v) { return v > 0; };
    if (!(pos(grid_h) && pos(grid_w) && pos(spectral_depth) && pos(slices) && pos(fc_cnn) && pos(lstm_units) &&
          pos(temporal_hidden) && pos(classes) && pos(reduction) && pos(spatial_kernel)))
      throw std::invalid_argument("model config: all dimensions must be positive");
    if (conv_channels.empty() || conv_channels.size() != conv_kernels.size())
      throw std::invalid_argument("model config: conv_channels and conv_kernels must have equal nonzero length");
    for (int k : conv_kernels)
      if (k <= 0 || k % 2 == 0) throw std::invalid_argument("model config: conv kernels must be odd");
    for (int c : conv_channels)
      if (c <= 0) throw std::invalid_argument("model config: conv channels must be positive");
    if (spatial_kernel % 2 == 0) throw std::invalid_argument("model config: spatial kernel must be odd");
    if (grid_h < 2 || grid_w < 2) throw std::invalid_argument("model config: grid too small to pool");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"grid", {c.grid_h, c.grid_w}},
       {"spectral_depth", c.spectral_depth},
       {"slices", c.slices},
       {"conv_channels", c.conv_channels},
       {"conv_kernels", c.conv_kernels},
       {"fc_cnn", c.fc_cnn},
       {"lstm_units", c.lstm_units},
       {"temporal_hidden", c.temporal_hidden},
       {"classes", c.classes},
       {"attention", {{"spectral", c.flags.spectral}, {"spatial", c.flags.spatial}, {"temporal", c.flags.temporal}}},
       {"reduction", c.reduction},
       {"spatial_kernel", c.spatial_kernel}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.grid_h = j.at("grid").at(0);
  c.grid_w = j.at("grid").at(1);
  c.spectral_depth = j.at("spectral_depth");
  c.slices = j.at("slices");
  c.conv_channels = j.at("conv_channels").get<std::vector<int>>();
  c.conv_kernels = j.at("conv_kernels").get<std::vector<int>>();
  c.fc_cnn = j.at("fc_cnn");
  c.lstm_units = j.at("lstm_units");
  c.temporal_hidden = j.at("temporal_hidden");
  c.classes = j.at("classes");
  c.flags.spectral = j.at("attention").at("spectral");
  c.flags.spatial = j.at("attention").at("spatial");
  c.flags.temporal = j.at("attention").at("temporal");
  c.reduction = j.at("reduction");
  c.spatial_kernel = j.at("spatial_kernel");
}

namespace nn {

using diff::Var;

// Channel gate in (0,1) from spatially pooled statistics; the bottleneck MLP
// (no biases) is shared by the average and max paths.
//   V: [M,H,W,C] -> [M,C]
template <class T>
Var<T> spectral_attention(const Var<T>& v, const Var<T>& w1, const Var<T>& w2) {
  auto mlp = [&](const Var<T>& pooled) { return diff::dense(diff::relu(diff::dense(pooled, w1)), w2); };
  return diff::sigmoid(diff::add(mlp(diff::global_avg_spatial(v)), mlp(diff::global_max_spatial(v))));
}

template <class T>
Var<T> apply_spectral(const Var<T>& v, const Var<T>& gate) {
  return diff::scale_channels(v, gate);
}

// Cell gate in (0,1): [channel-mean, channel-max] -> conv (same) -> sigmoid.
//   V': [M,H,W,C] -> [M,H,W,1]
template <class T>
Var<T> spatial_attention(const Var<T>& v, const Var<T>& kernel, const Var<T>& bias) {
  auto pooled = diff::concat_last(diff::avg_over_channels(v), diff::max_over_channels(v));
  return diff::sigmoid(diff::conv2d(pooled, kernel, bias, diff::Padding::same));
}

template <class T>
Var<T> apply_spatial(const Var<T>& v, const Var<T>& gate) {
  return diff::scale_spatial(v, gate);
}

// Standard LSTM cell; gate rows of wx/wh/b are packed [input, forget, cell, output]:
//   i = sig(Wx_i x + Wh_i h + b_i)    f = sig(Wx_f x + Wh_f h + b_f)
//   g = tanh(Wx_g x + Wh_g h + b_g)   o = sig(Wx_o x + Wh_o h + b_o)
//   c' = f*c + i*g                    h' = o*tanh(c')
template <class T>
std::pair<Var<T>, Var<T>> lstm_step(const Var<T>& x, const Var<T>& h_prev, const Var<T>& c_prev, const Var<T>& wx,
                                    const Var<T>& wh, const Var<T>& b) {
  const int hidden = h_prev.shape().back();
  auto z = diff::add(diff::dense(x, wx, b), diff::dense(h_prev, wh));
  auto i = diff::sigmoid(diff::slice_last(z, 0, hidden));
  auto f = diff::sigmoid(diff::slice_last(z, hidden, hidden));
  auto g = diff::tanh(diff::slice_last(z, 2 * hidden, hidden));
  auto o = diff::sigmoid(diff::slice_last(z, 3 * hidden, hidden));
  auto c = diff::add(diff::mul(f, c_prev), diff::mul(i, g));
  auto h = diff::mul(o, diff::tanh(c));
  return {h, c};
}

}  // namespace nn

template <class T>
struct AttentionMaps {
  std::vector<diff::Var<T>> spectral;  // per stage [M,C], undefined when off
  std::vector<diff::Var<T>> spatial;   // per stage [M,H,W,1], undefined when off
  diff::Var<T> temporal;               // [N,T]
};

template <class T>
struct ForwardResult {
  diff::Var<T> logits;      // [N,classes]
  diff::Var<T> probs;       // [N,classes]
  diff::Var<T> slice_repr;  // P: [N,T,fc]
  diff::Var<T> bilstm;      // Y: [N,T,2*units]
  diff::Var<T> pooled;      // L: [N,2*units]
  diff::Var<T> last_stage;  // final conv stage after attention, pre-pool: [N*T,H,W,C]
  AttentionMaps<T> attention;
};

template <class T>
class Model {
 public:
  using Var = diff::Var<T>;

  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    using diff::Init;
    int cin = cfg_.spectral_depth;
    for (std::size_t s = 0; s < cfg_.conv_channels.size(); ++s) {
      const int k = cfg_.conv_kernels[s], c = cfg_.conv_channels[s], hid = cfg_.attention_hidden(c);
      const int sk = cfg_.spatial_kernel;
      const std::string p = "conv" + std::to_string(s + 1);
      params_.add(p + ".kernel", {k, k, cin, c}, {Init::he_uniform, k * k * cin, k * k * c});
      params_.add(p + ".bias", {c}, {Init::zeros});
      params_.add(p + ".spectral.w1", {hid, c}, {Init::xavier_uniform, c, hid});
      params_.add(p + ".spectral.w2", {c, hid}, {Init::xavier_uniform, hid, c});
      params_.add(p + ".spatial.kernel", {sk, sk, 2, 1}, {Init::xavier_uniform, sk * sk * 2, sk * sk});
      params_.add(p + ".spatial.bias", {1}, {Init::zeros});
      cin = c;
    }
    params_.add("cnn_fc.weight", {cfg_.fc_cnn, cfg_.flat_size()}, {Init::he_uniform, cfg_.flat_size(), cfg_.fc_cnn});
    params_.add("cnn_fc.bias", {cfg_.fc_cnn}, {Init::zeros});
    const int u = cfg_.lstm_units;
    for (const char* dir : {"lstm_fwd", "lstm_bwd"}) {
      const std::string p = dir;
      params_.add(p + ".wx", {4 * u, cfg_.fc_cnn}, {Init::xavier_uniform, cfg_.fc_cnn, 4 * u});
      params_.add(p + ".wh", {4 * u, u}, {Init::xavier_uniform, u, 4 * u});
      params_.add(p + ".bias", {4 * u}, {Init::zeros});
    }
    params_.add("temporal.w1", {cfg_.temporal_hidden, 2 * u}, {Init::xavier_uniform, 2 * u, cfg_.temporal_hidden});
    params_.add("temporal.b1", {cfg_.temporal_hidden}, {Init::zeros});
    params_.add("temporal.w2", {1, cfg_.temporal_hidden}, {Init::xavier_uniform, cfg_.temporal_hidden, 1});
    params_.add("temporal.b2", {1}, {Init::zeros});
    params_.add("classifier.weight", {cfg_.classes, 2 * u}, {Init::xavier_uniform, 2 * u, cfg_.classes});
    params_.add("classifier.bias", {cfg_.classes}, {Init::zeros});
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  diff::ParamStore<T>& params() { return params_; }
  const diff::ParamStore<T>& params() const { return params_; }

  // Draws all weights; LSTM forget-gate biases start at 1.
  void initialize(std::uint64_t seed) {
    params_.initialize(seed);
    const int u = cfg_.lstm_units;
    for (const char* dir : {"lstm_fwd.bias", "lstm_bwd.bias"}) {
      auto& b = params_.at(dir).value();
      std::fill(b.begin() + u, b.begin() + 2 * u, T(1));
    }
  }

  // Packs samples into per-slice images [N*T, H, W, F]; image n*T + t is slice t of sample n.
  Var pack(const std::vector<const Sample4D*>& batch) const {
    const int n = static_cast<int>(batch.size());
    const int h = cfg_.grid_h, w = cfg_.grid_w, f = cfg_.spectral_depth, t = cfg_.slices;
    std::vector<T> img(static_cast<std::size_t>(n) * t * h * w * f);
    for (int b = 0; b < n; ++b) {
      const Sample4D& s = *batch[b];
      if (s.h != h || s.w != w || s.features != f || s.slices != t)
        throw diff::ShapeError("sample dims (" + std::to_string(s.h) + "," + std::to_string(s.w) + "," +
                               std::to_string(s.features) + "," + std::to_string(s.slices) + ") do not match model config");
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
          for (int k = 0; k < f; ++k)
            for (int sl = 0; sl < t; ++sl)
              img[((((static_cast<std::size_t>(b) * t + sl) * h + r) * w + c) * f) + k] = static_cast<T>(s.at(r, c, k, sl));
    }
    return Var::constant({n * t, h, w, f}, std::move(img));
  }

  // Conv stages with their attention modules: [M,H,W,F] -> [M,H,W,C_last].
  Var cnn_stages(const Var& images, AttentionMaps<T>* maps = nullptr) const {
    Var v = images;
    for (std::size_t s = 0; s < cfg_.conv_channels.size(); ++s) {
      const std::string p = "conv" + std::to_string(s + 1);
      v = diff::relu(diff::conv2d(v, params_.at(p + ".kernel"), params_.at(p + ".bias"), diff::Padding::same));
      Var spec_gate, spat_gate;
      if (cfg_.flags.spectral) {
        spec_gate = nn::spectral_attention(v, params_.at(p + ".spectral.w1"), params_.at(p + ".spectral.w2"));
        v = nn::apply_spectral(v, spec_gate);
      }
      if (cfg_.flags.spatial) {
        spat_gate = nn::spatial_attention(v, params_.at(p + ".spatial.kernel"), params_.at(p + ".spatial.bias"));
        v = nn::apply_spatial(v, spat_gate);
      }
      if (maps) {
        maps->spectral.push_back(spec_gate);
        maps->spatial.push_back(spat_gate);
      }
    }
    return v;
  }

  // 2x2 max-pool -> flatten -> dense -> relu: [M,H,W,C] -> [M,fc].
  Var cnn_head(const Var& last_stage) const {
    auto pooled = diff::max_pool2d(last_stage);
    auto flat = diff::reshape(pooled, {pooled.dim(0), cfg_.flat_size()});
    return diff::relu(diff::dense(flat, params_.at("cnn_fc.weight"), params_.at("cnn_fc.bias")));
  }

  // Shared CNN over slice images [M,H,W,F] -> P [M,fc].
  Var cnn_forward(const Var& images) const { return cnn_head(cnn_stages(images)); }

  // P [N,T,F] -> Y [N,T,2U]; Y_t = [forward output at t, backward output aligned to t].
  Var bilstm_forward(const Var& seq) const {
    const int n = seq.dim(0), steps = seq.dim(1), u = cfg_.lstm_units;
    auto run = [&](const std::string& dir, bool reverse) {
      Var h = Var::zeros({n, u}), c = Var::zeros({n, u});
      std::vector<Var> outs(steps);
      for (int k = 0; k < steps; ++k) {
        const int t = reverse ? steps - 1 - k : k;
        std::tie(h, c) = nn::lstm_step(diff::time_step(seq, t), h, c, params_.at(dir + ".wx"), params_.at(dir + ".wh"),
                                       params_.at(dir + ".bias"));
        outs[t] = h;
      }
      return outs;
    };
    auto fwd = run("lstm_fwd", false);
    auto bwd = run("lstm_bwd", true);
    std::vector<Var> merged;
    for (int t = 0; t < steps; ++t) merged.push_back(diff::concat_last(fwd[t], bwd[t]));
    return diff::stack_time(merged);
  }

  // Y [N,T,2U] -> softmax weights [N,T]; uniform when the temporal flag is off.
  Var temporal_attention(const Var& y) const {
    const int n = y.dim(0), steps = y.dim(1), f = y.dim(2);
    if (!cfg_.flags.temporal)
      return Var::constant({n, steps}, std::vector<T>(static_cast<std::size_t>(n) * steps, T(1) / static_cast<T>(steps)));
    auto rows = diff::reshape(y, {n * steps, f});
    auto hidden = diff::relu(diff::dense(rows, params_.at("temporal.w1"), params_.at("temporal.b1")));
    auto score = diff::dense(hidden, params_.at("temporal.w2"), params_.at("temporal.b2"));
    return diff::softmax(diff::reshape(score, {n, steps}));
  }

  Var classify_logits(const Var& pooled) const {
    return diff::dense(pooled, params_.at("classifier.weight"), params_.at("classifier.bias"));
  }

  ForwardResult<T> forward(const std::vector<const Sample4D*>& batch) const { return forward_images(pack(batch), static_cast<int>(batch.size())); }

  ForwardResult<T> forward(const Sample4D& s) const { return forward(std::vector<const Sample4D*>{&s}); }

  ForwardResult<T> forward_images(const Var& images, int n) const {
    if (images.dim(0) != n * cfg_.slices) throw diff::ShapeError("image count does not match batch x slices");
    ForwardResult<T> r;
    r.last_stage = cnn_stages(images, &r.attention);
    finish_forward(r, n);
    return r;
  }

  // Everything after the conv stages, reading r.last_stage.
  void finish_forward(ForwardResult<T>& r, int n) const {
    r.slice_repr = diff::reshape(cnn_head(r.last_stage), {n, cfg_.slices, cfg_.fc_cnn});
    r.bilstm = bilstm_forward(r.slice_repr);
    r.attention.temporal = temporal_attention(r.bilstm);
    r.pooled = diff::weighted_time_sum(r.bilstm, r.attention.temporal);
    r.logits = classify_logits(r.pooled);
    r.probs = diff::softmax(r.logits);
  }

  // Same weights held as constants.
  Model frozen_copy() const {
    Model m(cfg_, params_.clone(false));
    return m;
  }

  nlohmann::json config_json() const { return cfg_; }

 private:
  Model(ModelConfig cfg, diff::ParamStore<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {}

  ModelConfig cfg_;
  diff::ParamStore<T> params_;
};

// The checkpoint config holds the model config and, optionally, the input
// normalizer the weights were trained against.
template <class T>
void save_model(const std::string& path, const Model<T>& m, const Normalizer* norm = nullptr) {
  nlohmann::json cfg = {{"model", m.config_json()}, {"normalizer", nullptr}};
  if (norm) cfg["normalizer"] = *norm;
  diff::save_checkpoint(path, m.params(), cfg);
}

// Rebuilds a model from a self-describing checkpoint.
template <class T>
Model<T> load_model(const diff::CheckpointData& data) {
  Model<T> m(data.config.at("model").get<ModelConfig>());
  diff::load_values(m.params(), data);
  return m;
}

template <class T>
Model<T> load_model(const std::string& path) {
  return load_model<T>(diff::read_checkpoint(path));
}

inline std::optional<Normalizer> checkpoint_normalizer(const diff::CheckpointData& data) {
  const auto it = data.config.find("normalizer");
  if (it == data.config.end() || it->is_null()) return std::nullopt;
  return it->get<Normalizer>();
}

}  // namespace eeg4d
