#include <gtest/gtest.h>

#include <cmath>

#include "support.hpp"

using namespace bqkit;
using bqkit::test::TempDir;

namespace {

Model dense_model(std::size_t in, std::size_t out) {
  return ModelBuilder({in}).dense("fc", in, out).softmax("sm").build(out);
}

TEST(TensorStore, EmptyTensorListRoundTrips) {
  TempDir dir("ts");
  Model m;
  m.manifest.input_shape = {3};
  m.manifest.num_classes = 3;
  const auto bytes = save_model(m, dir / "empty.nnmod");
  EXPECT_EQ(bytes, std::filesystem::file_size(dir / "empty.nnmod"));
  EXPECT_EQ(load_model(dir / "empty.nnmod"), m);
}

TEST(TensorStore, F32PayloadIsSixteenBytes) {
  TempDir dir("ts");
  Model m = dense_model(2, 2);
  m.at("fc.weight").values = {1, 2, 3, 4};
  m.at("fc.bias").values = {0, 0};
  const Bytes bytes = serialize_model(m);
  ASSERT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "NNM1");
  const auto header_len = get_le<std::uint32_t>(bytes, 4);
  const Json header = Json::parse(bytes.begin() + 8, bytes.begin() + 8 + header_len);
  const auto& entry = header.at("tensors").at(0);
  EXPECT_EQ(entry.at("name"), "fc.weight");
  EXPECT_EQ(entry.at("length"), 16u);
  // Payload is raw little-endian row-major.
  const std::size_t start = 8 + header_len + entry.at("offset").get<std::size_t>();
  for (int i = 0; i < 4; ++i) EXPECT_EQ(get_le<float>(bytes, start + 4 * i), static_cast<float>(i + 1));
  save_model(m, dir / "m.nnmod");
  EXPECT_EQ(load_model(dir / "m.nnmod"), m);
}

TEST(TensorStore, U8QuantParamsSurviveRoundTrip) {
  TempDir dir("ts");
  Model m = dense_model(2, 2);
  m.at("fc.weight") = TensorRecord::u8("fc.weight", {2, 2}, {0, 3, 7, 255}, {0.1, 3});
  save_model(m, dir / "q.nnmod");
  const Model r = load_model(dir / "q.nnmod");
  const auto& t = r.at("fc.weight");
  ASSERT_TRUE(t.quant);
  EXPECT_EQ(t.quant->scale, 0.1);  // bit-exact through JSON
  EXPECT_EQ(t.quant->zero_point, 3);
  EXPECT_EQ(t.levels, (std::vector<std::uint8_t>{0, 3, 7, 255}));
}

TEST(TensorStore, RandomModelsRoundTripBitExactly) {
  Rng rng = make_rng(11, "ts/roundtrip");
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t in = 1 + uniform_index(rng, 9), out = 2 + uniform_index(rng, 5);
    Model m = dense_model(in, out);
    for (auto& v : m.at("fc.weight").values) v = static_cast<float>(standard_normal(rng) * 1e3);
    m.at("fc.weight").values[0] = -0.0f;
    m.at("fc.bias").values[0] = std::numeric_limits<float>::denorm_min();
    if (trial % 2) {
      const auto q = choose_quant_params(m.at("fc.weight").values);
      m.at("fc.weight") = quantize_affine(m.at("fc.weight"), q);
    }
    const Bytes a = serialize_model(m);
    const Model r = deserialize_model(a);
    EXPECT_EQ(serialize_model(r), a);
    EXPECT_EQ(r, m);
    EXPECT_TRUE(std::signbit(r.at("fc.weight").to_float()[0]) || trial % 2);
  }
}

TEST(TensorStore, QuantizeRoundsHalfAwayFromZero) {
  const QuantParams q{0.1, 0};
  const auto t = quantize_affine(TensorRecord::f32("x", {3}, {0.25f, -0.25f, 100.0f}), q);
  EXPECT_EQ(t.levels[0], 3);  // round(2.5) = 3
  EXPECT_EQ(t.levels[1], 0);  // round(-2.5) = -3, clamped
  EXPECT_EQ(t.levels[2], 255);
  EXPECT_EQ(quantize_value(-0.25, QuantParams{0.1, 10}), 7);  // round(-2.5) = -3
  EXPECT_EQ(quantize_value(0.0, QuantParams{0.37, 7}), 7);
  EXPECT_EQ(quantize_value(-100.0, q), 0);
}

TEST(TensorStore, DequantizeHandValues) {
  const auto t = TensorRecord::u8("x", {2}, {3, 5}, {0.1, 0});
  const auto d = dequantize_affine(t);
  EXPECT_NEAR(d.values[0], 0.3, 1e-7);
  EXPECT_EQ(dequantize_affine(TensorRecord::u8("y", {1}, {5}, {0.1, 5})).values[0], 0.0f);
  EXPECT_THROW(dequantize_affine(TensorRecord::f32("z", {1}, {1.0f})), Error);
}

TEST(TensorStore, QuantizeDequantizeErrorBoundedByHalfScale) {
  Rng rng = make_rng(3, "ts/qdq");
  for (int trial = 0; trial < 200; ++trial) {
    const double scale = 0.001 + uniform01(rng);
    const int zp = static_cast<int>(uniform_index(rng, 256));
    const QuantParams q{scale, zp};
    const double lo = scale * (0 - zp), hi = scale * (255 - zp);
    const double x = lo + (hi - lo) * uniform01(rng);
    const double back = scale * (quantize_value(x, q) - zp);
    EXPECT_LE(std::abs(back - x), scale / 2 * (1 + 1e-9));
  }
}

TEST(TensorStore, RejectsInvalidInputs) {
  EXPECT_THROW(quantize_affine(TensorRecord::f32("x", {1}, {1.0f}), QuantParams{0.0, 0}), Error);
  EXPECT_THROW(TensorRecord::f32("x", {2, 2}, {1.0f}), Error);
  EXPECT_THROW(parse_layer_kind("LSTM"), Error);
  Model m = dense_model(2, 2);
  m.at("fc.weight").shape = {4};
  m.at("fc.weight").values.resize(4);
  EXPECT_THROW(validate_model(m), Error);
  Model dup = dense_model(2, 2);
  dup.tensors.push_back(dup.tensors.front());
  EXPECT_THROW(validate_model(dup), Error);
}

TEST(TensorStore, RejectsShapeChainMismatch) {
  Model m = ModelBuilder({4}).dense("a", 4, 3).relu("r").dense("b", 3, 2).build(2);
  m.manifest.layers[2].name = "b";
  m.at("b.weight") = TensorRecord::f32("b.weight", {5, 2}, std::vector<float>(10));
  EXPECT_THROW(validate_model(m), Error);
  Model wrong_classes = ModelBuilder({4}).dense("a", 4, 3).build(3);
  wrong_classes.manifest.num_classes = 2;
  EXPECT_THROW(validate_model(wrong_classes), Error);
}

TEST(TensorStore, CorruptFilesAreRejected) {
  Model m = dense_model(2, 2);
  Bytes b = serialize_model(m);
  Bytes truncated(b.begin(), b.end() - 3);
  EXPECT_THROW(deserialize_model(truncated), Error);
  b[0] = 'X';
  EXPECT_THROW(deserialize_model(b), Error);
}

TEST(TensorStore, UnwritablePathThrowsAndLeavesNoFile) {
  const std::filesystem::path p = "/nonexistent-dir/x.nnmod";
  EXPECT_THROW(save_model(dense_model(2, 2), p), Error);
  EXPECT_FALSE(std::filesystem::exists(p));
}

TEST(TensorStore, PointwiseFlagMustMatchKernel) {
  Model m = ModelBuilder({1, 4, 4}).conv("c", 1, 2, 1).flatten("f").dense("d", 32, 2).build(2);
  EXPECT_TRUE(m.manifest.layers[0].pointwise);
  m.manifest.layers[0].pointwise = false;
  EXPECT_THROW(validate_model(m), Error);
}

}  // namespace
