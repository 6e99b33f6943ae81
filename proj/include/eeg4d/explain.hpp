#pragma once

// Grad-CAM++ electrode heatmaps over the final conv stage.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "eeg4d/layout.hpp"
#include "eeg4d/model.hpp"

namespace eeg4d {

struct Heatmap {
  int h = 0;
  int w = 0;
  std::vector<double> values;  // row-major, in [0,1]
  int target_class = 0;
  std::string slice_policy = "mean";

  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * w + c]; }
};

// One Grad-CAM++ map from activations A and dScore/dA, both [H,W,C]:
//   alpha = g^2 / (2 g^2 + sum_ij(A) g^3)   (alpha = 0 where the denominator is 0)
//   w_k   = sum_ij alpha * relu(g)
//   map   = relu(sum_k w_k A_k)
inline std::vector<double> gradcam_pp_map(const double* act, const double* grad, int h, int w, int c) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  std::vector<double> weights(c, 0.0);
  for (int k = 0; k < c; ++k) {
    double sum_a = 0.0;
    for (std::size_t p = 0; p < hw; ++p) sum_a += act[p * c + k];
    double wk = 0.0;
    for (std::size_t p = 0; p < hw; ++p) {
      const double g = grad[p * c + k];
      const double g2 = g * g;
      const double denom = 2.0 * g2 + sum_a * g2 * g;
      const double alpha = denom != 0.0 ? g2 / denom : 0.0;
      wk += alpha * std::max(g, 0.0);
    }
    weights[k] = wk;
  }
  std::vector<double> map(hw, 0.0);
  for (std::size_t p = 0; p < hw; ++p) {
    double v = 0.0;
    for (int k = 0; k < c; ++k) v += weights[k] * act[p * c + k];
    map[p] = std::max(v, 0.0);
  }
  return map;
}

// Scales so the maximum is 1; an all-zero map stays zero.
inline void max_normalize(std::vector<double>& v) {
  const double mx = v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
  if (mx > 0.0)
    for (auto& x : v) x /= mx;
}

// Runs the model on one sample, backpropagates the target pre-softmax logit
// to the final conv stage, and averages the per-slice maps.
template <class T>
Heatmap gradcam_pp(const Model<T>& model, const Sample4D& sample, int target_class) {
  const int classes = model.config().classes;
  if (target_class < 0 || target_class >= classes)
    throw std::out_of_range("target class " + std::to_string(target_class) + " outside [0," + std::to_string(classes) + ")");
  // Constant weights: the conv stages build no graph and nothing is written
  // back into the caller's parameters. Only the captured stage is a leaf.
  const Model<T> frozen = model.frozen_copy();
  ForwardResult<T> fwd;
  {
    auto stages = frozen.cnn_stages(frozen.pack({&sample}));
    fwd.last_stage = diff::Var<T>::parameter(stages.shape(), stages.value());
  }
  frozen.finish_forward(fwd, 1);
  auto score = diff::sum(diff::slice_last(fwd.logits, target_class, 1));
  const auto& act_var = fwd.last_stage;
  const int slices = act_var.dim(0), h = act_var.dim(1), w = act_var.dim(2), c = act_var.dim(3);

  std::vector<double> act(act_var.value().begin(), act_var.value().end());
  std::vector<double> grad(act.size(), 0.0);
  if (score.requires_grad() && act_var.requires_grad()) {
    diff::backward(score);
    std::copy(act_var.grad().begin(), act_var.grad().end(), grad.begin());
  }

  Heatmap hm;
  hm.h = h;
  hm.w = w;
  hm.target_class = target_class;
  hm.values.assign(static_cast<std::size_t>(h) * w, 0.0);
  const std::size_t per = static_cast<std::size_t>(h) * w * c;
  for (int s = 0; s < slices; ++s) {
    auto m = gradcam_pp_map(act.data() + s * per, grad.data() + s * per, h, w, c);
    for (std::size_t i = 0; i < m.size(); ++i) hm.values[i] += m[i] / static_cast<double>(slices);
  }
  max_normalize(hm.values);
  return hm;
}

inline std::string heatmap_csv(const Heatmap& hm) {
  std::ostringstream os;
  os.precision(17);
  for (int r = 0; r < hm.h; ++r) {
    for (int c = 0; c < hm.w; ++c) {
      if (c) os << ',';
      os << hm.at(r, c);
    }
    os << '\n';
  }
  return os.str();
}

inline Heatmap parse_heatmap_csv(std::istream& is) {
  Heatmap hm;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    int cols = 0;
    while (std::getline(ls, cell, ',')) {
      hm.values.push_back(std::stod(cell));
      ++cols;
    }
    if (hm.h == 0) hm.w = cols;
    else if (cols != hm.w) throw std::runtime_error("ragged heatmap CSV");
    ++hm.h;
  }
  return hm;
}

struct RankedCell {
  std::string channel;
  int row = 0;
  int col = 0;
  double value = 0.0;
};

// Electrode cells by descending value; ties keep row-major order.
inline std::vector<RankedCell> top_channels(const Heatmap& hm, const ElectrodeLayout& layout, std::size_t k = 3) {
  std::vector<RankedCell> cells;
  for (const auto& p : layout.placements)
    if (p.row < hm.h && p.col < hm.w) cells.push_back({p.channel, p.row, p.col, hm.at(p.row, p.col)});
  std::stable_sort(cells.begin(), cells.end(), [](const RankedCell& a, const RankedCell& b) {
    return a.row != b.row ? a.row < b.row : a.col < b.col;
  });
  std::stable_sort(cells.begin(), cells.end(), [](const RankedCell& a, const RankedCell& b) { return a.value > b.value; });
  if (cells.size() > k) cells.resize(k);
  return cells;
}

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // RGB, row-major

  std::uint8_t* px(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* px(int x, int y) const { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
};

// Blue -> cyan -> yellow -> dark red, for v in [0,1].
inline std::array<std::uint8_t, 3> jet_color(double v) {
  v = std::clamp(v, 0.0, 1.0);
  auto ch = [](double x) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(x, 0.0, 1.0))); };
  const double r = 1.5 - std::abs(4.0 * v - 3.0);
  const double g = 1.5 - std::abs(4.0 * v - 2.0);
  const double b = 1.5 - std::abs(4.0 * v - 1.0);
  return {ch(r), ch(g), ch(b)};
}

namespace detail {

// 5x7 glyphs for the characters used in montage names, one byte per row
// (low 5 bits, MSB = leftmost column).
inline const std::uint8_t* glyph(char ch) {
  static const std::uint8_t blank[7] = {0, 0, 0, 0, 0, 0, 0};
  static const struct {
    char c;
    std::uint8_t rows[7];
  } font[] = {
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
  };
  const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
  for (const auto& g : font)
    if (g.c == up) return g.rows;
  return blank;
}

}  // namespace detail

struct RenderOptions {
  int cell_px = 32;
  bool labels = true;
};

// Color-mapped raster of the grid; electrode names are drawn in black at
// their cells. Returns the image and a glyph mask (true on label pixels).
inline RgbImage render_heatmap_image(const Heatmap& hm, const ElectrodeLayout& layout, const RenderOptions& opt = {},
                                     std::vector<bool>* glyph_mask = nullptr) {
  RgbImage img;
  img.width = hm.w * opt.cell_px;
  img.height = hm.h * opt.cell_px;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * 3, 0);
  if (glyph_mask) glyph_mask->assign(static_cast<std::size_t>(img.width) * img.height, false);
  for (int r = 0; r < hm.h; ++r)
    for (int c = 0; c < hm.w; ++c) {
      const auto col = jet_color(hm.at(r, c));
      for (int y = 0; y < opt.cell_px; ++y)
        for (int x = 0; x < opt.cell_px; ++x) std::copy(col.begin(), col.end(), img.px(c * opt.cell_px + x, r * opt.cell_px + y));
    }
  if (!opt.labels) return img;
  for (const auto& p : layout.placements) {
    if (p.row >= hm.h || p.col >= hm.w) continue;
    const int text_w = static_cast<int>(p.channel.size()) * 6 - 1;
    const int x0 = p.col * opt.cell_px + std::max(0, (opt.cell_px - text_w) / 2);
    const int y0 = p.row * opt.cell_px + std::max(0, (opt.cell_px - 7) / 2);
    for (std::size_t i = 0; i < p.channel.size(); ++i) {
      const std::uint8_t* rows = detail::glyph(p.channel[i]);
      for (int gy = 0; gy < 7; ++gy)
        for (int gx = 0; gx < 5; ++gx) {
          if (!(rows[gy] & (0x10 >> gx))) continue;
          const int x = x0 + static_cast<int>(i) * 6 + gx, y = y0 + gy;
          if (x >= img.width || y >= img.height) continue;
          auto* d = img.px(x, y);
          d[0] = d[1] = d[2] = 0;
          if (glyph_mask) (*glyph_mask)[static_cast<std::size_t>(y) * img.width + x] = true;
        }
    }
  }
  return img;
}

}  // namespace eeg4d
