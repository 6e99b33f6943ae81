#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include <nlohmann/json.hpp>

#include "eeg4d/layout.hpp"
#include "eeg4d/sigproc.hpp"

namespace eeg4d {

enum Label : int { kNegative = 0, kNeutral = 1, kPositive = 2 };

// [h x w x features x slices] row-major, plus label and provenance.
struct Sample4D {
  int h = 19;
  int w = 19;
  int features = 10;
  int slices = 6;
  std::vector<float> values;
  int label = 0;
  int subject = 0;
  int experiment = 0;

  static Sample4D zeros(int h, int w, int features, int slices) {
    Sample4D s;
    s.h = h;
    s.w = w;
    s.features = features;
    s.slices = slices;
    s.values.assign(static_cast<std::size_t>(h) * w * features * slices, 0.0f);
    return s;
  }

  std::size_t index(int r, int c, int k, int t) const {
    return ((static_cast<std::size_t>(r) * w + c) * features + k) * slices + t;
  }
  float& at(int r, int c, int k, int t) { return values[index(r, c, k, t)]; }
  float at(int r, int c, int k, int t) const { return values[index(r, c, k, t)]; }
};

class ShapeMismatch : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Scatters channel features onto the sparse grid; unoccupied cells stay 0.
inline Sample4D to_grid(const sigproc::FeatureTensor& feat, const ElectrodeLayout& layout) {
  if (feat.channels != static_cast<int>(layout.size()))
    throw ShapeMismatch("feature tensor has " + std::to_string(feat.channels) + " channels, layout has " +
                        std::to_string(layout.size()));
  Sample4D s = Sample4D::zeros(layout.grid_h, layout.grid_w, feat.features, feat.windows);
  s.label = feat.label;
  s.subject = feat.subject;
  s.experiment = feat.experiment;
  for (int ch = 0; ch < feat.channels; ++ch) {
    const auto& p = layout.placements[ch];
    for (int k = 0; k < feat.features; ++k)
      for (int t = 0; t < feat.windows; ++t) s.at(p.row, p.col, k, t) = feat.at(ch, k, t);
  }
  return s;
}

// Inverse of to_grid: gathers the occupied cells back in layout order.
inline sigproc::FeatureTensor from_grid(const Sample4D& s, const ElectrodeLayout& layout) {
  if (s.h != layout.grid_h || s.w != layout.grid_w) throw ShapeMismatch("sample grid does not match layout grid");
  sigproc::FeatureTensor ft;
  ft.channels = static_cast<int>(layout.size());
  ft.features = s.features;
  ft.windows = s.slices;
  ft.values.assign(static_cast<std::size_t>(ft.channels) * ft.features * ft.windows, 0.0f);
  ft.label = s.label;
  ft.subject = s.subject;
  ft.experiment = s.experiment;
  for (int ch = 0; ch < ft.channels; ++ch) {
    const auto& p = layout.placements[ch];
    for (int k = 0; k < ft.features; ++k)
      for (int t = 0; t < ft.windows; ++t) ft.at(ch, k, t) = s.at(p.row, p.col, k, t);
  }
  return ft;
}

inline constexpr double kStdFloor = 1e-6;

// Per-feature-slot z-score statistics over electrode cells.
struct Normalizer {
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<bool> mask;  // occupied cells, row-major
};

inline void to_json(nlohmann::json& j, const Normalizer& n) {
  j = {{"mean", n.mean}, {"std", n.std}, {"mask", n.mask}};
}

inline void from_json(const nlohmann::json& j, Normalizer& n) {
  j.at("mean").get_to(n.mean);
  j.at("std").get_to(n.std);
  j.at("mask").get_to(n.mask);
  if (n.mean.size() != n.std.size()) throw std::invalid_argument("normalizer: mean/std length mismatch");
}

// Statistics pool every electrode cell of every slice of every sample passed
// in; padding cells are excluded.
inline Normalizer fit_normalizer(const std::vector<const Sample4D*>& train, const ElectrodeLayout& layout) {
  if (train.empty()) throw std::invalid_argument("fit_normalizer: empty training set");
  const int nf = train.front()->features;
  Normalizer norm;
  norm.mask = layout.occupied_mask();
  std::vector<double> sum(nf, 0.0), sumsq(nf, 0.0);
  std::size_t count = 0;
  for (const Sample4D* s : train) {
    if (s->features != nf || s->h != layout.grid_h || s->w != layout.grid_w)
      throw ShapeMismatch("fit_normalizer: inconsistent sample shapes");
    for (int r = 0; r < s->h; ++r)
      for (int c = 0; c < s->w; ++c) {
        if (!norm.mask[static_cast<std::size_t>(r) * s->w + c]) continue;
        for (int k = 0; k < nf; ++k)
          for (int t = 0; t < s->slices; ++t) {
            const double v = s->at(r, c, k, t);
            sum[k] += v;
            sumsq[k] += v * v;
          }
      }
    count += layout.size() * static_cast<std::size_t>(s->slices);
  }
  norm.mean.resize(nf);
  norm.std.resize(nf);
  for (int k = 0; k < nf; ++k) {
    const double m = sum[k] / static_cast<double>(count);
    const double var = std::max(sumsq[k] / static_cast<double>(count) - m * m, 0.0);
    norm.mean[k] = m;
    norm.std[k] = std::max(std::sqrt(var), kStdFloor);
  }
  return norm;
}

inline Normalizer fit_normalizer(const std::vector<Sample4D>& train, const ElectrodeLayout& layout) {
  std::vector<const Sample4D*> ptrs;
  for (const auto& s : train) ptrs.push_back(&s);
  return fit_normalizer(ptrs, layout);
}

// Z-scores electrode cells; padding cells are left at exactly 0.
inline Sample4D normalize(const Sample4D& s, const Normalizer& norm) {
  if (static_cast<int>(norm.mean.size()) != s.features) throw ShapeMismatch("normalizer feature count mismatch");
  Sample4D out = s;
  for (int r = 0; r < s.h; ++r)
    for (int c = 0; c < s.w; ++c) {
      const bool occupied = norm.mask[static_cast<std::size_t>(r) * s.w + c];
      for (int k = 0; k < s.features; ++k)
        for (int t = 0; t < s.slices; ++t)
          out.at(r, c, k, t) = occupied ? static_cast<float>((s.at(r, c, k, t) - norm.mean[k]) / norm.std[k]) : 0.0f;
    }
  return out;
}

}  // namespace eeg4d
