#pragma once

// Labelled synthetic 4D samples with planted class structure, for desk-scale
// training checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "eeg4d/layout.hpp"
#include "eeg4d/repr4d.hpp"

namespace eeg4d {

enum class SynthMode {
  // Class k lifts DE band k over its region during its own block of slices.
  blocks,
  // Same planted pattern, but confined to a single slice drawn per sample.
  single_slice,
};

struct SynthSpec {
  int classes = 3;
  int per_class = 40;
  std::uint64_t seed = 1;
  int bands = 5;
  int slices = 6;
  double amplitude = 1.5;  // DE lift inside the planted pattern
  double noise = 0.5;      // per-entry DE noise std
  SynthMode mode = SynthMode::blocks;
  int subject = 0;
  int experiment = 0;
};

// Electrodes whose DE gets lifted for class k (left frontal, central midline,
// right parieto-occipital, then wrapping).
inline std::vector<std::string> synth_region(int k) {
  static const std::vector<std::vector<std::string>> regions = {
      {"F7", "F5", "F3", "FT7", "FC5", "FC3", "T7", "C5"},
      {"FCZ", "FC1", "FC2", "C1", "CZ", "C2", "CP1", "CPZ"},
      {"P4", "P6", "P8", "PO4", "PO6", "PO8", "O2", "CB2"},
      {"FP1", "FPZ", "FP2", "AF3", "AF4", "F1", "FZ", "F2"},
      {"TP7", "CP5", "P7", "P5", "PO7", "PO5", "CB1", "O1"},
  };
  return regions[static_cast<std::size_t>(k) % regions.size()];
}

// Slices [first, first+count) carrying class k's pattern in block mode.
inline std::pair<int, int> synth_slice_block(int k, int classes, int slices) {
  const int per = std::max(1, slices / classes);
  const int first = (k * per) % slices;
  return {first, std::min(per, slices - first)};
}

// Features per electrode cell: DE slots are N(base_b, noise); each PSD slot is
// the Gaussian variance matching its DE value, exp(2*DE)/(2*pi*e). Padding
// cells stay zero. Labels are balanced and emitted class by class.
inline std::vector<Sample4D> synth_dataset(const SynthSpec& spec, const ElectrodeLayout& layout = default_layout()) {
  if (spec.classes < 1 || spec.per_class < 0 || spec.bands < 1 || spec.slices < 1)
    throw std::invalid_argument("synth_dataset: invalid spec");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_int_distribution<int> pick_slice(0, spec.slices - 1);
  const double two_pi_e = 2.0 * std::numbers::pi * std::numbers::e;

  std::vector<std::set<int>> region_idx(spec.classes);
  for (int k = 0; k < spec.classes; ++k)
    for (const auto& name : synth_region(k))
      if (int i = layout.index_of(name); i >= 0) region_idx[k].insert(i);

  std::vector<Sample4D> out;
  for (int k = 0; k < spec.classes; ++k) {
    for (int n = 0; n < spec.per_class; ++n) {
      Sample4D s = Sample4D::zeros(layout.grid_h, layout.grid_w, 2 * spec.bands, spec.slices);
      s.label = k;
      s.subject = spec.subject;
      s.experiment = spec.experiment;
      int first = 0, count = 0;
      if (spec.mode == SynthMode::blocks) {
        std::tie(first, count) = synth_slice_block(k, spec.classes, spec.slices);
      } else {
        first = pick_slice(rng);
        count = 1;
      }
      const int band = k % spec.bands;
      for (std::size_t ch = 0; ch < layout.size(); ++ch) {
        const auto& p = layout.placements[ch];
        const bool in_region = region_idx[k].count(static_cast<int>(ch)) > 0;
        for (int t = 0; t < spec.slices; ++t) {
          const bool active = in_region && t >= first && t < first + count;
          for (int b = 0; b < spec.bands; ++b) {
            double de = 0.5 + 0.25 * b + spec.noise * gauss(rng);
            if (active && b == band) de += spec.amplitude;
            s.at(p.row, p.col, b, t) = static_cast<float>(de);
            s.at(p.row, p.col, spec.bands + b, t) = static_cast<float>(std::exp(2.0 * de) / two_pi_e);
          }
        }
      }
      out.push_back(std::move(s));
    }
  }
  return out;
}

}  // namespace eeg4d
