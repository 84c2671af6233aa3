#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace bqkit;

namespace {

// Nearest grid level by exhaustive search; ties toward the larger level.
double nearest_level(double x, int bits, double lo, double hi) {
  const int n = (1 << bits) - 1;
  double best = lo, best_d = INFINITY;
  for (int l = 0; l <= n; ++l) {
    const double v = lo + (hi - lo) * l / n;
    const double d = std::abs(v - x);
    if (d <= best_d) {
      best_d = d;
      best = v;
    }
  }
  return best;
}

TEST(FakeQuantize, OneBitGrid) {
  const std::vector<double> x = {0.3, -0.3, 5.0, -5.0};
  const auto r = fake_quantize(x, 1, -1.0, 1.0);
  EXPECT_EQ(r.values, (std::vector<double>{1.0, -1.0, 1.0, -1.0}));
  EXPECT_EQ(r.levels, (std::vector<std::uint32_t>{1, 0, 1, 0}));
}

TEST(FakeQuantize, MatchesNearestLevelOracleAndIsIdempotent) {
  Rng rng = make_rng(1, "fq");
  for (int trial = 0; trial < 300; ++trial) {
    const int bits = 1 + static_cast<int>(uniform_index(rng, 8));
    const double lo = -2 * uniform01(rng) - 0.01, hi = 2 * uniform01(rng) + 0.01;
    std::vector<double> x(20);
    for (auto& v : x) v = (hi - lo) * (1.5 * uniform01(rng) - 0.25) + lo;
    const auto r = fake_quantize(x, bits, lo, hi);
    const auto again = fake_quantize(r.values, bits, lo, hi);
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_NEAR(r.values[i], nearest_level(x[i], bits, lo, hi), 1e-12);
      EXPECT_EQ(again.values[i], r.values[i]);
      EXPECT_GE(r.values[i], lo - 1e-12);
      EXPECT_LE(r.values[i], hi + 1e-12);
    }
  }
}

TEST(FakeQuantize, EightBitErrorBoundedByHalfStep) {
  Rng rng = make_rng(2, "fq8");
  const double lo = -0.7, hi = 1.3, step = (hi - lo) / 255;
  std::vector<double> x(5000);
  for (auto& v : x) v = lo + (hi - lo) * uniform01(rng);
  const auto r = fake_quantize(x, 8, lo, hi);
  double worst = 0;
  for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(r.values[i] - x[i]));
  EXPECT_LE(worst, step / 2 + 1e-12);
}

TEST(FakeQuantize, InvalidRangeThrows) {
  const std::vector<double> x = {0.0};
  EXPECT_THROW(fake_quantize(x, 4, 1.0, 1.0), Error);
  EXPECT_THROW(fake_quantize(x, 4, 1.0, -1.0), Error);
  EXPECT_THROW(fake_quantize(x, 0, -1.0, 1.0), Error);
}

TEST(Ewgs, HandValues) {
  EXPECT_NEAR(ewgs_scale(0.5, 0.7, 0.5, 1.0), 0.6, 1e-12);
  EXPECT_NEAR(ewgs_scale(-0.5, 0.7, 0.5, 1.0), -0.4, 1e-12);
  EXPECT_EQ(ewgs_scale(0.0, 0.7, 0.5, 1.0), 0.0);
}

TEST(Ewgs, ZeroDeltaIsIdentity) {
  Rng rng = make_rng(3, "ewgs0");
  std::vector<double> g(500), x(500), xq(500);
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = standard_normal(rng);
    x[i] = standard_normal(rng);
    xq[i] = standard_normal(rng);
  }
  EXPECT_EQ(ewgs_scale_gradients(g, x, xq, 0.0), g);
}

TEST(Ewgs, PreservesSignWhenScaledErrorBelowOne) {
  Rng rng = make_rng(4, "ewgs-sign");
  for (int i = 0; i < 2000; ++i) {
    const double g = standard_normal(rng), x = standard_normal(rng), xq = standard_normal(rng);
    const double delta = 3 * uniform01(rng);
    const double out = ewgs_scale(g, x, xq, delta);
    if (delta * std::abs(x - xq) < 1.0) {
      EXPECT_EQ(std::signbit(out), std::signbit(g)) << g;
    }
  }
}

TEST(Ewgs, ShapeMismatchThrows) {
  const std::vector<double> a(3), b(2);
  EXPECT_THROW(ewgs_scale_gradients(a, a, b, 0.1), Error);
}

TEST(QatConfigTest, Validation) {
  QatConfig q;
  q.weight_clip["fc"] = {1.0, 1.0};
  EXPECT_THROW(q.validate(), Error);
  QatConfig d;
  d.delta = -1;
  EXPECT_THROW(d.validate(), Error);
  d.delta = NAN;
  EXPECT_THROW(d.validate(), Error);
}

TEST(Percentiles, ClipRangeUsesFirstAndNinetyNinthPercentiles) {
  std::vector<float> w(101);
  for (int i = 0; i <= 100; ++i) w[i] = static_cast<float>(i);
  const auto c = percentile_clip(w);
  EXPECT_DOUBLE_EQ(c.low, 1.0);
  EXPECT_DOUBLE_EQ(c.high, 99.0);
  const std::vector<float> flat(10, 0.5f);
  const auto f = percentile_clip(flat);
  EXPECT_LT(f.low, f.high);
}

QatConfig qat_for(const Model& m, GradientEstimator est, double delta) {
  QatConfig q;
  q.weight_bits = 4;
  q.act_bits = 4;
  q.delta = delta;
  q.estimator = est;
  for (const auto* l : m.weight_layers()) q.weight_clip[l->name] = percentile_clip(m.at(*l->weight_ref).values);
  return q;
}

TEST(QatTraining, ZeroDeltaEqualsSteBitExactlyOverAnEpoch) {
  Model m = bqkit::test::trained_mlp();
  const auto data = bqkit::test::blobs(300, Split::Train);
  m.manifest.act_quant = ActivationQuant{4, calibrate_activation_clips(m, data)};
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.learning_rate = 0.01;
  const auto a = train(m, data, cfg, qat_for(m, GradientEstimator::EWGS, 0.0));
  const auto b = train(m, data, cfg, qat_for(m, GradientEstimator::STE, 0.7));
  EXPECT_EQ(serialize_model(a.model), serialize_model(b.model));
  const auto c = train(m, data, cfg, qat_for(m, GradientEstimator::EWGS, 0.7));
  EXPECT_NE(serialize_model(c.model), serialize_model(a.model));
}

TEST(QatTraining, ForwardUsesGridWeightsAndActivations) {
  Model m = bqkit::test::trained_mlp();
  const auto data = bqkit::test::blobs(64, Split::Test);
  const auto q = qat_for(m, GradientEstimator::EWGS, 0.2);
  // Fake quantizing the weights by hand must match the QAT network.
  Model manual = m;
  for (const auto& [layer, clip] : q.weight_clip) {
    auto& t = manual.weights_of(layer);
    const UniformGrid grid(q.weight_bits, clip.low, clip.high);
    for (auto& v : t.values) v = static_cast<float>(grid(v));
  }
  Network net(m);
  net.enable_qat(q);
  const auto a = net.forward(data.inputs, data.size());
  const auto b = forward(manual, data.inputs, data.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], 1e-6);
  // Activation grid: a network ending in a quantized ReLU emits grid values only.
  Model aq = ModelBuilder({8}).dense("fc", 8, 4).relu("r").build(4);
  Rng rng = make_rng(6, "actq");
  for (auto& v : aq.at("fc.weight").values) v = static_cast<float>(standard_normal(rng));
  const double hi = 1.5;
  aq.manifest.act_quant = ActivationQuant{4, {{"r", hi}}};
  for (double v : forward(aq, data.inputs, data.size())) {
    const double level = v / (hi / 15);
    EXPECT_NEAR(level, std::round(level), 1e-9);
    EXPECT_LE(v, hi + 1e-12);
  }
}

TEST(QatTraining, ActivationGradientIsZeroAboveClip) {
  // One ReLU unit fed by the input; above the clip the loss no longer depends on x.
  Model m = ModelBuilder({1}).dense("a", 1, 1, false).relu("r").dense("b", 1, 2).build(2);
  m.at("a.weight").values = {1.0f};
  m.at("b.weight").values = {1.0f, -1.0f};
  m.manifest.act_quant = ActivationQuant{8, {{"r", 1.0}}};
  const Network net(m);
  const std::vector<int> y = {0};
  EXPECT_EQ(net.backward(std::vector<double>{3.0}, y).input_grad[0], 0.0);
  EXPECT_NE(net.backward(std::vector<double>{0.5}, y).input_grad[0], 0.0);
}

}  // namespace
