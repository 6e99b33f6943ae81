// Minimal end-to-end run: a synthetic raw recording goes through the filter
// bank and grid mapping, then one forward pass of a small model.

#include <cmath>
#include <iostream>
#include <numbers>
#include <random>

#include "eeg4d/eeg4d.hpp"

int main() {
  using namespace eeg4d;
  const auto& layout = default_layout();

  sigproc::RawRecording rec;
  rec.fs = 200.0;
  rec.channels = seed62_channels();
  std::mt19937 rng(3);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  for (std::size_t c = 0; c < rec.channels.size(); ++c) {
    std::vector<float> x(1200);
    for (std::size_t t = 0; t < x.size(); ++t)
      x[t] = std::sin(2.0f * std::numbers::pi_v<float> * 10.0f * t / 200.0f) + 0.3f * noise(rng);
    rec.data.push_back(std::move(x));
  }

  const auto bank = sigproc::FilterBank::design(sigproc::canonical_bands(), rec.fs);
  std::vector<Sample4D> samples;
  for (const auto& seg : sigproc::segment(rec)) samples.push_back(to_grid(sigproc::extract_features(seg, bank), layout));
  std::cout << samples.size() << " samples of " << samples[0].h << "x" << samples[0].w << "x" << samples[0].features
            << "x" << samples[0].slices << "\n";

  const auto norm = fit_normalizer(samples, layout);
  Model<float> model(ModelConfig::small());
  model.initialize(42);
  const auto out = model.forward(normalize(samples[0], norm));
  std::cout << "class probabilities:";
  for (float p : out.probs.value()) std::cout << " " << p;
  std::cout << "\n";
}
