#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "eeg4d/diff/gradcheck.hpp"
#include "eeg4d/model.hpp"
#include "eeg4d/synth.hpp"

using namespace eeg4d;
using V = diff::Var<double>;

namespace {

std::vector<double> randn(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

V rand_const(diff::Shape s, std::uint64_t seed, double scale = 1.0) { return V::constant(s, randn(diff::shape_size(s), seed, scale)); }
V rand_param(diff::Shape s, std::uint64_t seed, double scale = 1.0) { return V::parameter(s, randn(diff::shape_size(s), seed, scale)); }

Sample4D random_sample(const ModelConfig& c, std::uint64_t seed, int label = 0) {
  Sample4D s = Sample4D::zeros(c.grid_h, c.grid_w, c.spectral_depth, c.slices);
  const auto v = randn(s.values.size(), seed);
  std::copy(v.begin(), v.end(), s.values.begin());
  s.label = label;
  return s;
}

void zero_all(diff::ParamStore<double>& p) {
  for (auto& e : p.entries()) std::fill(e.var.value().begin(), e.var.value().end(), 0.0);
}

}  // namespace

TEST(ModelConfig, FullDefaults) {
  const auto c = ModelConfig::full();
  EXPECT_EQ(c.flat_size(), 9 * 9 * 64);
  EXPECT_EQ(c.fc_cnn, 150);
  EXPECT_EQ(c.lstm_units, 36);
  EXPECT_EQ(c.conv_channels, (std::vector<int>{64, 128, 256, 64}));
  EXPECT_EQ(c.attention_hidden(64), 8);
  EXPECT_EQ(c.attention_hidden(4), 4);
  EXPECT_THROW(ModelConfig::preset("huge"), std::invalid_argument);
  auto bad = c;
  bad.conv_kernels = {5, 4, 5, 3};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(ModelConfig, JsonRoundTrip) {
  auto c = ModelConfig::small();
  c.flags = {false, true, false};
  const nlohmann::json j = c;
  const auto back = j.get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  EXPECT_FALSE(back.flags.spectral);
  EXPECT_TRUE(back.flags.spatial);
}

TEST(ModelConfig, FlagLabels) {
  EXPECT_EQ((AttentionFlags{true, true, true}.label()), "all-on");
  EXPECT_EQ((AttentionFlags{false, false, false}.label()), "all-off");
  EXPECT_EQ((AttentionFlags{true, false, true}.label()), "-spatial");
  EXPECT_EQ((AttentionFlags{false, true, false}.label()), "-spectral-temporal");
}

TEST(Model, ParameterInventory) {
  Model<float> m(ModelConfig::full());
  m.initialize(3);
  std::set<std::string> names;
  for (const auto& e : m.params().entries()) EXPECT_TRUE(names.insert(e.name).second) << e.name;
  EXPECT_EQ(m.params().at("conv1.kernel").shape(), (diff::Shape{5, 5, 10, 64}));
  EXPECT_EQ(m.params().at("conv4.kernel").shape(), (diff::Shape{3, 3, 256, 64}));
  EXPECT_EQ(m.params().at("conv2.spectral.w1").shape(), (diff::Shape{16, 128}));
  EXPECT_EQ(m.params().at("conv1.spatial.kernel").shape(), (diff::Shape{7, 7, 2, 1}));
  EXPECT_EQ(m.params().at("cnn_fc.weight").shape(), (diff::Shape{150, 5184}));
  EXPECT_EQ(m.params().at("lstm_fwd.wx").shape(), (diff::Shape{144, 150}));
  EXPECT_EQ(m.params().at("temporal.w1").shape(), (diff::Shape{32, 72}));
  EXPECT_EQ(m.params().at("classifier.weight").shape(), (diff::Shape{3, 72}));
  const auto& fb = m.params().at("lstm_bwd.bias").value();
  for (int i = 0; i < 144; ++i) EXPECT_EQ(fb[i], (i >= 36 && i < 72) ? 1.0f : 0.0f);
}

TEST(Model, InitializationIsSeeded) {
  Model<float> a(ModelConfig::tiny()), b(ModelConfig::tiny()), c(ModelConfig::tiny());
  a.initialize(5);
  b.initialize(5);
  c.initialize(6);
  for (const auto& e : a.params().entries()) EXPECT_EQ(e.var.value(), b.params().at(e.name).value());
  EXPECT_NE(a.params().at("conv1.kernel").value(), c.params().at("conv1.kernel").value());
}

TEST(Model, ShapeChainFullConfig) {
  Model<float> m(ModelConfig::full());
  m.initialize(1);
  SynthSpec spec;
  spec.per_class = 1;
  const auto data = synth_dataset(spec);
  diff::NoGradGuard g;
  const auto r = m.forward(data[0]);
  EXPECT_EQ(r.last_stage.shape(), (diff::Shape{6, 19, 19, 64}));
  EXPECT_EQ(r.slice_repr.shape(), (diff::Shape{1, 6, 150}));
  EXPECT_EQ(r.bilstm.shape(), (diff::Shape{1, 6, 72}));
  EXPECT_EQ(r.attention.temporal.shape(), (diff::Shape{1, 6}));
  EXPECT_EQ(r.pooled.shape(), (diff::Shape{1, 72}));
  EXPECT_EQ(r.probs.shape(), (diff::Shape{1, 3}));
  double s = 0;
  for (float p : r.probs.value()) s += p;
  EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(Model, RejectsMismatchedSamples) {
  Model<float> m(ModelConfig::tiny());
  auto s = Sample4D::zeros(19, 19, 10, 2);
  EXPECT_THROW(m.forward(s), diff::ShapeError);
}

TEST(Model, BatchEqualsIndividual) {
  Model<double> m(ModelConfig::tiny());
  m.initialize(2);
  const auto a = random_sample(m.config(), 1), b = random_sample(m.config(), 2);
  const auto both = m.forward(std::vector<const Sample4D*>{&a, &b});
  const auto ra = m.forward(a), rb = m.forward(b);
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(both.probs.value()[c], ra.probs.value()[c], 1e-12);
    EXPECT_NEAR(both.probs.value()[3 + c], rb.probs.value()[c], 1e-12);
  }
}

TEST(Attention, SpectralDegenerateCases) {
  // Constant per channel: avg and max paths coincide.
  std::vector<double> v(2 * 3 * 3 * 4);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.5 + static_cast<double>(i % 4) + static_cast<double>(i / 36);
  auto x = V::constant({2, 3, 3, 4}, v);
  auto w1 = rand_const({4, 4}, 1), w2 = rand_const({4, 4}, 2);
  auto a = nn::spectral_attention(x, w1, w2);
  auto pooled = diff::global_avg_spatial(x);
  auto mlp = diff::dense(diff::relu(diff::dense(pooled, w1)), w2);
  auto expect = diff::sigmoid(diff::scale(mlp, 2.0));
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.value()[i], expect.value()[i], 1e-12);

  auto z = nn::spectral_attention(rand_const({1, 4, 4, 4}, 3), V::zeros({4, 4}), V::zeros({4, 4}));
  for (double g : z.value()) EXPECT_EQ(g, 0.5);
}

TEST(Attention, SpatialDegenerateCases) {
  auto x = rand_const({1, 6, 6, 3}, 4);
  auto zero = nn::spatial_attention(x, V::zeros({7, 7, 2, 1}), V::zeros({1}));
  for (double g : zero.value()) EXPECT_EQ(g, 0.5);

  // Spatially constant input with a 3x3 kernel: interior cells agree.
  std::vector<double> cst(1 * 9 * 9 * 3);
  for (std::size_t i = 0; i < cst.size(); ++i) cst[i] = 0.3 * static_cast<double>(i % 3) - 0.2;
  auto a = nn::spatial_attention(V::constant({1, 9, 9, 3}, cst), rand_const({3, 3, 2, 1}, 5), rand_const({1}, 6));
  const double ref = a.value()[4 * 9 + 4];
  for (int r = 1; r < 8; ++r)
    for (int c = 1; c < 8; ++c) EXPECT_NEAR(a.value()[r * 9 + c], ref, 1e-12);
}

TEST(Attention, GatesShrinkMagnitudes) {
  for (int trial = 0; trial < 50; ++trial) {
    auto v = diff::relu(rand_const({2, 5, 5, 6}, 100 + trial, 3.0));
    auto ag = nn::spectral_attention(v, rand_const({4, 6}, 200 + trial, 2.0), rand_const({6, 4}, 300 + trial, 2.0));
    auto v1 = nn::apply_spectral(v, ag);
    auto sg = nn::spatial_attention(v1, rand_const({7, 7, 2, 1}, 400 + trial), rand_const({1}, 500 + trial));
    auto v2 = nn::apply_spatial(v1, sg);
    // Closed interval: large logits saturate the sigmoid to exactly 0 or 1 in floating point.
    for (double g : ag.value()) ASSERT_TRUE(g >= 0 && g <= 1);
    for (double g : sg.value()) ASSERT_TRUE(g >= 0 && g <= 1);
    for (std::size_t i = 0; i < v.size(); ++i) {
      ASSERT_LE(std::abs(v1.value()[i]), std::abs(v.value()[i]));
      ASSERT_LE(std::abs(v2.value()[i]), std::abs(v1.value()[i]));
    }
  }
}

TEST(Attention, Gradients) {
  auto v = rand_param({2, 5, 5, 4}, 1), w1 = rand_param({4, 4}, 2), w2 = rand_param({4, 4}, 3);
  auto k = rand_param({7, 7, 2, 1}, 4, 0.3), b = rand_param({1}, 5);
  auto probe = rand_const({2, 5, 5, 4}, 6);
  auto f = [&] {
    auto v1 = nn::apply_spectral(v, nn::spectral_attention(v, w1, w2));
    auto v2 = nn::apply_spatial(v1, nn::spatial_attention(v1, k, b));
    return diff::sum(diff::mul(v2, probe));
  };
  diff::GradCheckOptions o;
  o.step = 1e-6;
  o.samples_per_tensor = 40;
  EXPECT_LT(diff::grad_check(f, {{"v", v}, {"w1", w1}, {"w2", w2}, {"k", k}, {"b", b}}, o).max_rel_error, 1e-6);
}

TEST(Lstm, ZeroWeightsGiveZeroState) {
  auto [h, c] = nn::lstm_step(rand_const({2, 5}, 1), V::zeros({2, 3}), V::zeros({2, 3}), V::zeros({12, 5}), V::zeros({12, 3}),
                              V::zeros({12}));
  for (double x : h.value()) EXPECT_EQ(x, 0.0);
  for (double x : c.value()) EXPECT_EQ(x, 0.0);
}

TEST(Lstm, SaturatedForgetGateCarriesCell) {
  const int u = 3;
  std::vector<double> b(4 * u, 0.0);
  for (int i = 0; i < u; ++i) {
    b[i] = -40.0;         // input gate closed
    b[u + i] = 40.0;      // forget gate open
    b[3 * u + i] = 40.0;  // output gate open
  }
  auto c_prev = rand_const({1, u}, 7);
  auto [h, c] = nn::lstm_step(rand_const({1, 4}, 8), rand_const({1, u}, 9), c_prev, rand_const({12, 4}, 10, 0.1),
                              rand_const({12, u}, 11, 0.1), V::constant({12}, b));
  for (int i = 0; i < u; ++i) {
    EXPECT_NEAR(c.value()[i], c_prev.value()[i], 1e-12);
    EXPECT_NEAR(h.value()[i], std::tanh(c_prev.value()[i]), 1e-12);
  }
}

TEST(Lstm, StepGradients) {
  auto x = rand_param({2, 4}, 1), h = rand_param({2, 3}, 2), c = rand_param({2, 3}, 3);
  auto wx = rand_param({12, 4}, 4), wh = rand_param({12, 3}, 5), b = rand_param({12}, 6);
  auto probe = rand_const({2, 3}, 7);
  auto f = [&] {
    auto [h2, c2] = nn::lstm_step(x, h, c, wx, wh, b);
    return diff::add(diff::sum(diff::mul(h2, probe)), diff::sum(diff::mul(c2, c2)));
  };
  diff::GradCheckOptions o;
  o.step = 1e-6;
  EXPECT_LT(diff::grad_check(f, {{"x", x}, {"h", h}, {"c", c}, {"wx", wx}, {"wh", wh}, {"b", b}}, o).max_rel_error, 1e-7);
}

TEST(BiLstm, ZeroParametersGiveZero) {
  Model<double> m(ModelConfig::tiny());
  zero_all(m.params());
  auto y = m.bilstm_forward(rand_const({2, 2, 16}, 3));
  for (double v : y.value()) EXPECT_EQ(v, 0.0);
}

TEST(BiLstm, DirectionsAreAligned) {
  auto cfg = ModelConfig::tiny();
  cfg.slices = 5;
  Model<double> m(cfg);
  m.initialize(4);
  const int u = cfg.lstm_units, f = cfg.fc_cnn, t_last = 4;
  auto base = randn(5 * f, 1);
  auto y0 = m.bilstm_forward(V::constant({1, 5, f}, base));
  auto bumped = base;
  for (int i = 0; i < f; ++i) bumped[t_last * f + i] += 1.0;
  auto y1 = m.bilstm_forward(V::constant({1, 5, f}, bumped));
  // Forward half at t < last ignores the last input; backward half sees it everywhere.
  for (int t = 0; t < t_last; ++t) {
    for (int k = 0; k < u; ++k) EXPECT_EQ(y0.value()[t * 2 * u + k], y1.value()[t * 2 * u + k]) << t;
    double diff_b = 0;
    for (int k = 0; k < u; ++k) diff_b += std::abs(y0.value()[t * 2 * u + u + k] - y1.value()[t * 2 * u + u + k]);
    EXPECT_GT(diff_b, 0.0) << t;
  }
  // The backward direction at the last step has consumed only the last input.
  auto first_bumped = base;
  for (int i = 0; i < f; ++i) first_bumped[i] += 1.0;
  auto y2 = m.bilstm_forward(V::constant({1, 5, f}, first_bumped));
  for (int k = 0; k < u; ++k) EXPECT_EQ(y0.value()[t_last * 2 * u + u + k], y2.value()[t_last * 2 * u + u + k]);
}

TEST(Temporal, SumsToOneAndShiftInvariant) {
  Model<double> m(ModelConfig::full());
  auto& p = m.params();
  for (const char* n : {"temporal.w1", "temporal.b1", "temporal.w2"}) {
    auto& v = p.at(n).value();
    const auto r = randn(v.size(), std::hash<std::string>{}(n));
    std::copy(r.begin(), r.end(), v.begin());
  }
  for (int trial = 0; trial < 100; ++trial) {
    auto y = rand_const({1, 6, 72}, 1000 + trial, 2.0);
    p.at("temporal.b2").value()[0] = 0.0;
    auto a = m.temporal_attention(y);
    p.at("temporal.b2").value()[0] = 17.5;
    auto b = m.temporal_attention(y);
    double s = 0;
    for (int t = 0; t < 6; ++t) {
      s += a.value()[t];
      ASSERT_NEAR(a.value()[t], b.value()[t], 1e-12);
    }
    ASSERT_NEAR(s, 1.0, 1e-12);
    auto l = diff::weighted_time_sum(y, a);
    for (int f = 0; f < 72; ++f) {
      double lo = 1e300, hi = -1e300;
      for (int t = 0; t < 6; ++t) {
        lo = std::min(lo, y.value()[t * 72 + f]);
        hi = std::max(hi, y.value()[t * 72 + f]);
      }
      ASSERT_GE(l.value()[f], lo - 1e-12);
      ASSERT_LE(l.value()[f], hi + 1e-12);
    }
  }
}

TEST(Temporal, IdenticalRowsGiveUniform) {
  Model<double> m(ModelConfig::full());
  m.initialize(9);
  const auto row = randn(72, 3);
  std::vector<double> y;
  for (int t = 0; t < 6; ++t) y.insert(y.end(), row.begin(), row.end());
  auto a = m.temporal_attention(V::constant({1, 6, 72}, y));
  for (double v : a.value()) EXPECT_NEAR(v, 1.0 / 6, 1e-12);
}

TEST(Temporal, FlagOffAveragesSlices) {
  auto cfg = ModelConfig::tiny();
  cfg.flags.temporal = false;
  Model<double> m(cfg);
  m.initialize(3);
  const auto s = random_sample(cfg, 5);
  const auto r = m.forward(s);
  const int f = 2 * cfg.lstm_units;
  for (int k = 0; k < f; ++k) {
    double mean = 0;
    for (int t = 0; t < cfg.slices; ++t) mean += r.bilstm.value()[t * f + k];
    EXPECT_NEAR(r.pooled.value()[k], mean / cfg.slices, 1e-12);
  }
}

TEST(Classifier, ZeroWeightsAreUniform) {
  Model<double> m(ModelConfig::tiny());
  m.initialize(1);
  for (const char* n : {"classifier.weight", "classifier.bias"}) std::fill(m.params().at(n).value().begin(), m.params().at(n).value().end(), 0.0);
  const auto r = m.forward(random_sample(m.config(), 2));
  for (double p : r.probs.value()) EXPECT_NEAR(p, 1.0 / 3, 1e-15);
}

TEST(Cnn, ZeroInputZeroBiasesGivesZeroStages) {
  Model<double> m(ModelConfig::tiny());
  m.initialize(1);
  auto s = Sample4D::zeros(5, 5, 10, 2);
  const auto r = m.forward(s);
  for (double v : r.last_stage.value()) EXPECT_EQ(v, 0.0);
}

TEST(Cnn, DisabledAttentionIsIdentity) {
  auto cfg = ModelConfig::tiny();
  cfg.flags = {false, false, true};
  Model<double> m(cfg);
  m.initialize(8);
  const auto s = random_sample(cfg, 3);
  auto x = m.pack({&s});
  V manual = x;
  for (int i = 1; i <= 4; ++i) {
    const auto p = "conv" + std::to_string(i);
    manual = diff::relu(diff::conv2d(manual, m.params().at(p + ".kernel"), m.params().at(p + ".bias"), diff::Padding::same));
  }
  const auto got = m.cnn_stages(x);
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got.value()[i], manual.value()[i]);
}

TEST(Ablation, DisabledModulesGetNoGradient) {
  for (const auto& flags : {AttentionFlags{false, true, true}, AttentionFlags{true, false, true}, AttentionFlags{true, true, false}}) {
    auto cfg = ModelConfig::tiny();
    cfg.flags = flags;
    Model<double> m(cfg);
    m.initialize(4);
    const auto a = random_sample(cfg, 1, 0), b = random_sample(cfg, 2, 2);
    auto out = m.forward(std::vector<const Sample4D*>{&a, &b});
    m.params().zero_grad();
    diff::backward(diff::nll_loss(out.probs, {0, 2}));
    for (const auto& e : m.params().entries()) {
      const bool off = (!flags.spectral && e.name.find(".spectral.") != std::string::npos) ||
                       (!flags.spatial && e.name.find(".spatial.") != std::string::npos) ||
                       (!flags.temporal && e.name.rfind("temporal.", 0) == 0);
      double mag = 0;
      for (double g : e.var.grad()) mag += std::abs(g);
      if (off)
        EXPECT_EQ(mag, 0.0) << flags.label() << " " << e.name;
      // The scalar score bias cancels inside the softmax, so its gradient is 0.
      else if (e.name.find("bias") == std::string::npos && e.name != "temporal.b2")
        EXPECT_GT(mag, 0.0) << flags.label() << " " << e.name;
    }
  }
}

TEST(Model, FrozenCopyMatchesAndLeavesGradsAlone) {
  Model<double> m(ModelConfig::tiny());
  m.initialize(6);
  const auto s = random_sample(m.config(), 4);
  const auto frozen = m.frozen_copy();
  const auto a = m.forward(s), b = frozen.forward(s);
  EXPECT_EQ(a.probs.value(), b.probs.value());
  EXPECT_FALSE(b.probs.requires_grad());
  m.params().zero_grad();
  diff::backward(diff::sum(frozen.forward(s).logits));
  for (const auto& e : m.params().entries())
    for (double g : e.var.grad()) ASSERT_EQ(g, 0.0);
}

TEST(Model, EndToEndGradientTinyConfig) {
  Model<double> m(ModelConfig::tiny());
  m.initialize(11);
  // Nonzero biases so no unit sits exactly at a relu kink.
  for (auto& e : m.params().entries())
    if (e.name.find("bias") != std::string::npos || e.name.rfind("temporal.b", 0) == 0)
      for (auto& v : e.var.value()) v += 0.05;
  const auto a = random_sample(m.config(), 21, 0), b = random_sample(m.config(), 22, 1);
  auto loss = [&] { return diff::nll_loss(m.forward(std::vector<const Sample4D*>{&a, &b}).probs, {0, 1}); };
  std::vector<diff::NamedVar> ps;
  for (auto& e : m.params().entries()) ps.push_back({e.name, e.var});
  diff::GradCheckOptions o;
  o.step = 1e-6;
  o.samples_per_tensor = 6;
  const auto r = diff::grad_check(loss, ps, o);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_tensor << "[" << r.worst_index << "] analytic " << r.worst_analytic << " numeric "
                                   << r.worst_numeric;
}
