#pragma once

// Band decomposition and windowed DE/PSD feature extraction.
//
// Filters are Butterworth band-passes built by the analog-prototype route
// (low-pass poles -> band-pass transform -> bilinear transform with
// pre-warped edges) and run as cascaded second-order sections.

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace eeg4d::sigproc {

class InvalidBand : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};
class InvalidOrder : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};
class EmptyInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};
class InsufficientSamples : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};
class InvalidWindow : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct BandSpec {
  std::string name;
  double low_hz = 0.0;
  double high_hz = 0.0;
};

// delta, theta, alpha, beta, gamma.
inline std::vector<BandSpec> canonical_bands() {
  return {{"delta", 1, 4}, {"theta", 4, 8}, {"alpha", 8, 14}, {"beta", 14, 31}, {"gamma", 31, 51}};
}

// One biquad; a0 is normalized to 1.
struct Biquad {
  double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;
};

struct FilterCoeffs {
  std::vector<Biquad> sections;
  BandSpec band;
  double fs = 0.0;
  int order = 0;
};

struct RawRecording {
  std::vector<std::string> channels;
  // data[ch][t]
  std::vector<std::vector<float>> data;
  double fs = 200.0;
  int label = 0;
  int subject = 0;
  int experiment = 0;

  std::size_t n_samples() const { return data.empty() ? 0 : data.front().size(); }
};

// Channels x samples block cut from a recording.
struct Segment {
  std::vector<std::vector<double>> data;
  double fs = 200.0;
  int label = 0;
  int subject = 0;
  int experiment = 0;
};

// [channels x 2f x windows]; the 2f axis holds all DE slots first, then all PSD slots.
struct FeatureTensor {
  int channels = 0;
  int features = 0;
  int windows = 0;
  std::vector<float> values;
  int label = 0;
  int subject = 0;
  int experiment = 0;

  float& at(int c, int k, int t) { return values[(static_cast<std::size_t>(c) * features + k) * windows + t]; }
  float at(int c, int k, int t) const { return values[(static_cast<std::size_t>(c) * features + k) * windows + t]; }
};

inline constexpr double kVarianceFloor = 1e-10;

namespace detail {

using cplx = std::complex<double>;

// Pairs complex-conjugate roots (and leftover real roots) into quadratics
// z^2 + c1 z + c2. Sorted by modulus so the sharpest sections run last.
inline std::vector<std::pair<double, double>> pair_roots(std::vector<cplx> roots) {
  std::vector<cplx> upper, real;
  for (const auto& r : roots) {
    if (std::abs(r.imag()) < 1e-12 * std::max(1.0, std::abs(r)))
      real.emplace_back(r.real(), 0.0);
    else if (r.imag() > 0)
      upper.push_back(r);
  }
  std::sort(upper.begin(), upper.end(), [](cplx a, cplx b) { return std::abs(a) < std::abs(b); });
  std::sort(real.begin(), real.end(), [](cplx a, cplx b) { return a.real() < b.real(); });
  std::vector<std::pair<double, double>> quads;
  for (const auto& r : upper) quads.emplace_back(-2.0 * r.real(), std::norm(r));
  for (std::size_t i = 0; i + 1 < real.size(); i += 2)
    quads.emplace_back(-(real[i].real() + real[i + 1].real()), real[i].real() * real[i + 1].real());
  if (real.size() % 2) quads.emplace_back(-real.back().real(), 0.0);
  return quads;
}

}  // namespace detail

inline void validate_band(const BandSpec& band, double fs) {
  if (!(fs > 0.0)) throw InvalidBand("sampling rate must be positive");
  if (!(band.low_hz > 0.0) || !(band.high_hz > band.low_hz))
    throw InvalidBand("band '" + band.name + "' needs 0 < low < high");
  if (band.high_hz >= fs / 2.0)
    throw InvalidBand("band '" + band.name + "' upper edge " + std::to_string(band.high_hz) + " Hz is not below Nyquist " +
                      std::to_string(fs / 2.0) + " Hz");
}

// Digital Butterworth band-pass of the given prototype order. The result has
// 2*order poles, returned as `order` biquads each carrying one zero at z=+1
// and one at z=-1.
inline FilterCoeffs design_bandpass(const BandSpec& band, double fs, int order = 5) {
  using detail::cplx;
  if (order < 1) throw InvalidOrder("filter order must be >= 1, got " + std::to_string(order));
  validate_band(band, fs);

  const double k2 = 2.0 * fs;
  const double w1 = k2 * std::tan(std::numbers::pi * band.low_hz / fs);
  const double w2 = k2 * std::tan(std::numbers::pi * band.high_hz / fs);
  const double bw = w2 - w1;
  const double w0sq = w1 * w2;

  std::vector<cplx> digital_poles;
  cplx gain_den = 1.0;
  for (int k = 1; k <= order; ++k) {
    const cplx proto = std::polar(1.0, std::numbers::pi * (2.0 * k + order - 1) / (2.0 * order));
    // s^2 - proto*bw*s + w0^2 = 0
    const cplx half = proto * bw / 2.0;
    const cplx disc = std::sqrt(half * half - w0sq);
    for (cplx s : {half + disc, half - disc}) {
      digital_poles.push_back((k2 + s) / (k2 - s));
      gain_den *= (k2 - s);
    }
  }
  // order zeros at s=0 map to z=+1, order zeros at infinity map to z=-1.
  const double gain = std::real(std::pow(cplx(bw * k2), order) / gain_den);

  FilterCoeffs out;
  out.band = band;
  out.fs = fs;
  out.order = order;
  const auto quads = detail::pair_roots(digital_poles);
  for (std::size_t i = 0; i < quads.size(); ++i) {
    Biquad q;
    q.b0 = 1.0;
    q.b1 = 0.0;
    q.b2 = -1.0;
    q.a1 = quads[i].first;
    q.a2 = quads[i].second;
    out.sections.push_back(q);
  }
  // Spread the gain evenly so no single section carries a tiny coefficient.
  const double per = std::pow(std::abs(gain), 1.0 / static_cast<double>(out.sections.size()));
  for (auto& s : out.sections) {
    s.b0 *= per;
    s.b2 *= per;
  }
  if (gain < 0) {
    out.sections.front().b0 = -out.sections.front().b0;
    out.sections.front().b2 = -out.sections.front().b2;
  }
  return out;
}

// Largest pole modulus over all sections.
inline double max_pole_modulus(const FilterCoeffs& f) {
  double m = 0.0;
  for (const auto& s : f.sections) {
    const std::complex<double> disc = std::sqrt(std::complex<double>(s.a1 * s.a1 - 4.0 * s.a2));
    const auto r1 = (-s.a1 + disc) / 2.0, r2 = (-s.a1 - disc) / 2.0;
    m = std::max({m, std::abs(r1), std::abs(r2)});
  }
  return m;
}

// |H(e^{j 2 pi f / fs})| of the cascade.
inline double magnitude_at(const FilterCoeffs& f, double freq_hz) {
  const std::complex<double> z = std::polar(1.0, 2.0 * std::numbers::pi * freq_hz / f.fs);
  const std::complex<double> zi = 1.0 / z, zi2 = zi * zi;
  std::complex<double> h = 1.0;
  for (const auto& s : f.sections) h *= (s.b0 + s.b1 * zi + s.b2 * zi2) / (1.0 + s.a1 * zi + s.a2 * zi2);
  return std::abs(h);
}

// Causal direct-form-II-transposed cascade from zero state.
inline std::vector<double> apply_filter(const FilterCoeffs& f, std::span<const double> signal) {
  if (signal.empty()) throw EmptyInput("apply_filter: empty signal");
  std::vector<double> y(signal.begin(), signal.end());
  for (const auto& s : f.sections) {
    double z1 = 0.0, z2 = 0.0;
    for (double& v : y) {
      const double in = v;
      const double out = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * out + z2;
      z2 = s.b2 * in - s.a2 * out;
      v = out;
    }
  }
  return y;
}

// Non-overlapping segments of seconds*fs samples; the remainder is dropped.
inline std::vector<Segment> segment(const RawRecording& rec, double seconds = 3.0) {
  const auto len = static_cast<std::size_t>(std::llround(seconds * rec.fs));
  if (len == 0) throw InvalidWindow("segment length rounds to zero samples");
  std::vector<Segment> out;
  const std::size_t n = rec.n_samples();
  for (std::size_t start = 0; start + len <= n; start += len) {
    Segment s;
    s.fs = rec.fs;
    s.label = rec.label;
    s.subject = rec.subject;
    s.experiment = rec.experiment;
    s.data.reserve(rec.data.size());
    for (const auto& ch : rec.data) s.data.emplace_back(ch.begin() + start, ch.begin() + start + len);
    out.push_back(std::move(s));
  }
  return out;
}

// Mean square E[x^2].
inline double compute_psd(std::span<const double> window) {
  if (window.empty()) throw EmptyInput("compute_psd: empty window");
  double acc = 0.0;
  for (double v : window) acc += v * v;
  return acc / static_cast<double>(window.size());
}

// Differential entropy of a Gaussian fit: 0.5 * ln(2 pi e sigma^2), with the
// biased variance floored at kVarianceFloor.
inline double compute_de(std::span<const double> window) {
  if (window.size() < 2) throw InsufficientSamples("compute_de: need at least 2 samples");
  const double n = static_cast<double>(window.size());
  double mean = 0.0;
  for (double v : window) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : window) var += (v - mean) * (v - mean);
  var = std::max(var / n, kVarianceFloor);
  return 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e * var);
}

// Precomputed filter bank for one sampling rate.
struct FilterBank {
  std::vector<FilterCoeffs> filters;

  static FilterBank design(const std::vector<BandSpec>& bands, double fs, int order = 5) {
    FilterBank fb;
    for (const auto& b : bands) fb.filters.push_back(design_bandpass(b, fs, order));
    return fb;
  }
};

// Each channel is filtered once per band over the whole segment, then cut
// into windows; output is [channels x 2*bands x windows].
inline FeatureTensor extract_features(const Segment& seg, const FilterBank& bank, double window_seconds = 0.5) {
  if (seg.data.empty() || seg.data.front().empty()) throw EmptyInput("extract_features: empty segment");
  const std::size_t n = seg.data.front().size();
  const double wlen_exact = window_seconds * seg.fs;
  const auto wlen = static_cast<std::size_t>(std::llround(wlen_exact));
  if (wlen < 2 || std::abs(wlen_exact - static_cast<double>(wlen)) > 1e-9 || n % wlen != 0)
    throw InvalidWindow("window of " + std::to_string(window_seconds) + " s does not divide a " + std::to_string(n) +
                        "-sample segment");
  const int bands = static_cast<int>(bank.filters.size());

  FeatureTensor ft;
  ft.channels = static_cast<int>(seg.data.size());
  ft.features = 2 * bands;
  ft.windows = static_cast<int>(n / wlen);
  ft.values.assign(static_cast<std::size_t>(ft.channels) * ft.features * ft.windows, 0.0f);
  ft.label = seg.label;
  ft.subject = seg.subject;
  ft.experiment = seg.experiment;

  for (int c = 0; c < ft.channels; ++c) {
    if (seg.data[c].size() != n) throw InvalidWindow("extract_features: ragged segment");
    for (int b = 0; b < bands; ++b) {
      const auto filtered = apply_filter(bank.filters[b], seg.data[c]);
      for (int w = 0; w < ft.windows; ++w) {
        std::span<const double> win(filtered.data() + w * wlen, wlen);
        ft.at(c, b, w) = static_cast<float>(compute_de(win));
        ft.at(c, bands + b, w) = static_cast<float>(compute_psd(win));
      }
    }
  }
  return ft;
}

inline FeatureTensor extract_features(const Segment& seg, const std::vector<BandSpec>& bands, double window_seconds = 0.5) {
  return extract_features(seg, FilterBank::design(bands, seg.fs), window_seconds);
}

}  // namespace eeg4d::sigproc
