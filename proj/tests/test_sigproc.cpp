#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "eeg4d/sigproc.hpp"

using namespace eeg4d::sigproc;

namespace {

constexpr double kPi = std::numbers::pi;

// Squared magnitude of the bilinear-mapped analog Butterworth band-pass,
// written from the prototype directly: 1 / (1 + ((W^2 - W0^2) / (W * BW))^(2N)).
double butterworth_bp_magnitude(double f, double lo, double hi, double fs, int n) {
  auto warp = [fs](double hz) { return 2.0 * fs * std::tan(kPi * hz / fs); };
  const double w = warp(f), w1 = warp(lo), w2 = warp(hi);
  const double ratio = (w * w - w1 * w2) / (w * (w2 - w1));
  return std::sqrt(1.0 / (1.0 + std::pow(ratio * ratio, n)));
}

std::vector<double> sine(double hz, double fs, std::size_t n, double amp = 1.0, double phase = 0.0) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amp * std::sin(2.0 * kPi * hz * static_cast<double>(i) / fs + phase);
  return x;
}

std::vector<double> gaussian(std::size_t n, double sigma, std::uint64_t seed, double mean = 0.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(mean, sigma);
  std::vector<double> x(n);
  for (auto& v : x) v = d(rng);
  return x;
}

double db(double ratio) { return 20.0 * std::log10(ratio); }

BandSpec band(const char* name) {
  for (auto& b : canonical_bands())
    if (b.name == name) return b;
  throw std::logic_error("no band");
}

}  // namespace

TEST(BandDesign, CanonicalBands) {
  const auto b = canonical_bands();
  ASSERT_EQ(b.size(), 5u);
  EXPECT_EQ(b[0].name, "delta");
  EXPECT_DOUBLE_EQ(b[0].low_hz, 1);
  EXPECT_DOUBLE_EQ(b[0].high_hz, 4);
  EXPECT_DOUBLE_EQ(b[4].low_hz, 31);
  EXPECT_DOUBLE_EQ(b[4].high_hz, 51);
}

TEST(BandDesign, RejectsBadBandsAndOrders) {
  EXPECT_THROW(design_bandpass({"x", 31, 100}, 200), InvalidBand);
  EXPECT_THROW(design_bandpass({"x", 31, 120}, 200), InvalidBand);
  EXPECT_THROW(design_bandpass({"x", 10, 5}, 200), InvalidBand);
  EXPECT_THROW(design_bandpass({"x", 0, 5}, 200), InvalidBand);
  EXPECT_THROW(design_bandpass(band("alpha"), 200, 0), InvalidOrder);
  EXPECT_THROW(design_bandpass(band("alpha"), 200, -2), InvalidOrder);
}

TEST(BandDesign, OneBiquadPerPrototypeOrder) {
  for (int order : {1, 2, 3, 5, 8}) EXPECT_EQ(design_bandpass(band("beta"), 200, order).sections.size(), static_cast<std::size_t>(order));
}

TEST(BandDesign, MatchesAnalyticButterworthMagnitude) {
  for (double fs : {200.0, 1000.0})
    for (const auto& b : canonical_bands()) {
      const auto f = design_bandpass(b, fs, 5);
      for (double hz = 0.25; hz < fs / 2; hz += 0.37) {
        const double expect = butterworth_bp_magnitude(hz, b.low_hz, b.high_hz, fs, 5);
        EXPECT_NEAR(magnitude_at(f, hz), expect, 1e-7) << b.name << " fs=" << fs << " f=" << hz;
      }
    }
}

TEST(BandDesign, EdgesAreHalfPower) {
  for (const auto& b : canonical_bands()) {
    const auto f = design_bandpass(b, 200, 5);
    EXPECT_NEAR(magnitude_at(f, b.low_hz), 1.0 / std::sqrt(2.0), 1e-9) << b.name;
    EXPECT_NEAR(magnitude_at(f, b.high_hz), 1.0 / std::sqrt(2.0), 1e-9) << b.name;
  }
}

TEST(BandDesign, GammaPassesFortyOneAndRejectsTen) {
  const auto g = design_bandpass(band("gamma"), 200, 5);
  EXPECT_GE(db(magnitude_at(g, 41)), -3.0);
  EXPECT_LE(db(magnitude_at(g, 10)), -20.0);
}

TEST(BandDesign, AllBandsStable) {
  for (double fs : {128.0, 200.0, 1000.0})
    for (const auto& b : canonical_bands()) EXPECT_LT(max_pole_modulus(design_bandpass(b, fs, 5)), 1.0) << b.name << " @" << fs;
}

TEST(BandDesign, AlphaPeaksInsideBand) {
  const auto a = design_bandpass(band("alpha"), 200, 5);
  EXPECT_GT(magnitude_at(a, 11), magnitude_at(a, 4));
  EXPECT_GT(magnitude_at(a, 11), magnitude_at(a, 30));
}

TEST(ApplyFilter, EmptyThrows) {
  const auto g = design_bandpass(band("gamma"), 200);
  EXPECT_THROW(apply_filter(g, {}), EmptyInput);
}

TEST(ApplyFilter, ZeroInZeroOut) {
  const auto g = design_bandpass(band("gamma"), 200);
  std::vector<double> z(500, 0.0);
  for (double v : apply_filter(g, z)) EXPECT_EQ(v, 0.0);
}

TEST(ApplyFilter, Linear) {
  const auto b = design_bandpass(band("beta"), 200);
  const auto x = gaussian(800, 1.0, 1), y = gaussian(800, 3.0, 2);
  std::vector<double> mix(x.size()), kx(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mix[i] = 2.5 * x[i] - 0.75 * y[i];
    kx[i] = -4.0 * x[i];
  }
  const auto fx = apply_filter(b, x), fy = apply_filter(b, y), fm = apply_filter(b, mix), fk = apply_filter(b, kx);
  for (std::size_t i = 0; i < x.size(); ++i) {
    EXPECT_NEAR(fm[i], 2.5 * fx[i] - 0.75 * fy[i], 1e-9);
    EXPECT_NEAR(fk[i], -4.0 * fx[i], 1e-9);
  }
}

TEST(ApplyFilter, CausalImpulseResponse) {
  const auto d = design_bandpass(band("theta"), 200);
  std::vector<double> x(400, 0.0);
  x[100] = 1.0;
  const auto y = apply_filter(d, x);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(y[i], 0.0);
  EXPECT_NE(y[100], 0.0);
}

TEST(ApplyFilter, SteadyStateSineMatchesDesignedGain) {
  const auto g = design_bandpass(band("gamma"), 200);
  const auto y = apply_filter(g, sine(41, 200, 800));
  double peak = 0.0;
  for (std::size_t i = 400; i < y.size(); ++i) peak = std::max(peak, std::abs(y[i]));
  EXPECT_GE(peak, 0.7);
  EXPECT_LE(peak, 1.0);
  EXPECT_NEAR(peak, magnitude_at(g, 41), 0.02 * magnitude_at(g, 41));
}

TEST(ApplyFilter, SteadyStateRejection) {
  const auto g = design_bandpass(band("gamma"), 200);
  const auto pass = apply_filter(g, sine(41, 200, 2000));
  const auto stop = apply_filter(g, sine(10, 200, 2000));
  double ep = 0, es = 0;
  for (std::size_t i = 1000; i < 2000; ++i) {
    ep += pass[i] * pass[i];
    es += stop[i] * stop[i];
  }
  const double ain = std::sqrt(0.5);
  EXPECT_GE(db(std::sqrt(ep / 1000) / ain), -3.0);
  EXPECT_LE(db(std::sqrt(es / 1000) / ain), -20.0);
}

TEST(Segment, WholeSegmentsOnly) {
  RawRecording rec;
  rec.fs = 200;
  rec.channels = {"A", "B"};
  rec.data.assign(2, std::vector<float>(36000));
  for (std::size_t i = 0; i < rec.data[0].size(); ++i) rec.data[1][i] = static_cast<float>(i);
  const auto segs = segment(rec, 3);
  ASSERT_EQ(segs.size(), 60u);
  for (const auto& s : segs) ASSERT_EQ(s.data[0].size(), 600u);
  EXPECT_EQ(segs[1].data[1][0], 600.0);

  rec.data.assign(2, std::vector<float>(700));
  EXPECT_EQ(segment(rec, 3).size(), 1u);
  rec.data.assign(2, std::vector<float>(599));
  EXPECT_TRUE(segment(rec, 3).empty());
}

TEST(Segment, CarriesMetadata) {
  RawRecording rec;
  rec.fs = 100;
  rec.label = 2;
  rec.subject = 7;
  rec.experiment = 1;
  rec.channels = {"A"};
  rec.data.assign(1, std::vector<float>(300));
  const auto s = segment(rec, 3).at(0);
  EXPECT_EQ(s.label, 2);
  EXPECT_EQ(s.subject, 7);
  EXPECT_EQ(s.experiment, 1);
  EXPECT_EQ(s.fs, 100);
}

// Fifteen clips of roughly four minutes, 200 Hz, cut into 3 s segments.
TEST(Segment, FourMinuteClipsGiveAboutElevenHundredSegments) {
  const std::vector<std::size_t> clip_samples = {47001, 46601, 41201, 47601, 37001, 39001, 47401, 43201,
                                                 53001, 47401, 47001, 46601, 47001, 47601, 41201};
  std::size_t total = 0;
  for (auto n : clip_samples) {
    RawRecording rec;
    rec.channels = {"A"};
    rec.data.assign(1, std::vector<float>(n));
    total += segment(rec, 3).size();
  }
  EXPECT_NEAR(static_cast<double>(total), 1128.0, 0.01 * 1128.0);
}

TEST(Psd, Examples) {
  EXPECT_THROW(compute_psd({}), EmptyInput);
  std::vector<double> c(50, 2.0), z(50, 0.0);
  EXPECT_DOUBLE_EQ(compute_psd(c), 4.0);
  EXPECT_DOUBLE_EQ(compute_psd(z), 0.0);
  EXPECT_NEAR(compute_psd(sine(5, 200, 400)), 0.5, 1e-12);
}

TEST(Psd, QuadraticScaling) {
  const auto x = gaussian(300, 1.3, 4);
  std::vector<double> kx(x);
  for (auto& v : kx) v *= -3.0;
  EXPECT_NEAR(compute_psd(kx), 9.0 * compute_psd(x), 1e-10);
}

TEST(De, Examples) {
  EXPECT_THROW(compute_de(std::vector<double>{1.0}), InsufficientSamples);
  EXPECT_NEAR(compute_de(gaussian(10000, 1.0, 11)), 1.4189385, 0.05);
  EXPECT_NEAR(compute_de(gaussian(10000, 2.0, 12)), 0.5 * std::log(2 * kPi * std::numbers::e * 4), 0.05);

  // +/- s alternating has biased variance s^2 exactly.
  const double s = std::sqrt(1.0 / (2 * kPi * std::numbers::e));
  std::vector<double> alt(1000);
  for (std::size_t i = 0; i < alt.size(); ++i) alt[i] = (i % 2 ? s : -s);
  EXPECT_NEAR(compute_de(alt), 0.0, 1e-12);

  std::vector<double> flat(64, 3.0);
  EXPECT_DOUBLE_EQ(compute_de(flat), 0.5 * std::log(2 * kPi * std::numbers::e * kVarianceFloor));
}

// Numerically integrate -p ln p for the Gaussian fitted to the same window.
TEST(De, AgreesWithQuadratureOfFittedDensity) {
  for (double sigma : {0.3, 1.0, 2.0, 7.5}) {
    const auto x = gaussian(4000, sigma, 99);
    double m = 0, v = 0;
    for (double a : x) m += a;
    m /= x.size();
    for (double a : x) v += (a - m) * (a - m);
    const double sd = std::sqrt(v / x.size());
    const int steps = 20000;
    const double lo = m - 12 * sd, h = 24 * sd / steps;
    double acc = 0;
    for (int i = 0; i <= steps; ++i) {
      const double z = lo + i * h;
      const double p = std::exp(-0.5 * (z - m) * (z - m) / (sd * sd)) / (sd * std::sqrt(2 * kPi));
      const double wgt = (i == 0 || i == steps) ? 1 : (i % 2 ? 4 : 2);
      if (p > 0) acc += wgt * (-p * std::log(p));
    }
    EXPECT_NEAR(compute_de(x), acc * h / 3.0, 1e-6) << sigma;
  }
}

TEST(De, ScalingAndShiftLaws) {
  const auto x = gaussian(2000, 0.8, 5);
  for (double k : {-3.0, 0.5, 2.0, 40.0}) {
    std::vector<double> kx(x);
    for (auto& v : kx) v *= k;
    EXPECT_NEAR(compute_de(kx), compute_de(x) + std::log(std::abs(k)), 1e-6) << k;
  }
  std::vector<double> shifted(x);
  for (auto& v : shifted) v += 17.0;
  EXPECT_NEAR(compute_de(shifted), compute_de(x), 1e-9);
}

TEST(Features, ShapeAndOrdering) {
  Segment seg;
  seg.fs = 200;
  seg.label = 1;
  for (int c = 0; c < 62; ++c) seg.data.push_back(gaussian(600, 1.0, 100 + c));
  const auto ft = extract_features(seg, canonical_bands(), 0.5);
  EXPECT_EQ(ft.channels, 62);
  EXPECT_EQ(ft.features, 10);
  EXPECT_EQ(ft.windows, 6);
  EXPECT_EQ(ft.values.size(), 62u * 10 * 6);
  EXPECT_EQ(ft.label, 1);
  for (float v : ft.values) EXPECT_TRUE(std::isfinite(v));

  // DE slot b and PSD slot 5+b describe the same window: recompute channel 3, band 2, window 4.
  const auto f = design_bandpass(canonical_bands()[2], 200);
  const auto y = apply_filter(f, seg.data[3]);
  std::span<const double> w(y.data() + 400, 100);
  EXPECT_NEAR(ft.at(3, 2, 4), compute_de(w), 1e-5);
  EXPECT_NEAR(ft.at(3, 7, 4), compute_psd(w), 1e-5 * std::max(1.0, compute_psd(w)));
}

TEST(Features, WindowMustDivideSegment) {
  Segment seg;
  seg.fs = 200;
  seg.data.push_back(gaussian(600, 1.0, 1));
  EXPECT_THROW(extract_features(seg, canonical_bands(), 0.7), InvalidWindow);
  EXPECT_THROW(extract_features(seg, canonical_bands(), 0.4), InvalidWindow);
  EXPECT_NO_THROW(extract_features(seg, canonical_bands(), 1.0));
}

TEST(Features, ToneLandsInItsBand) {
  Segment seg;
  seg.fs = 200;
  for (int c = 0; c < 62; ++c) seg.data.push_back(sine(41, 200, 600, 1.0 + 0.01 * c, 0.1 * c));
  const auto ft = extract_features(seg, canonical_bands());
  for (int c = 0; c < 62; ++c)
    for (int t = 0; t < 6; ++t) EXPECT_GT(ft.at(c, 5 + 4, t), ft.at(c, 5 + 0, t)) << c << "," << t;
}
