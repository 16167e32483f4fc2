#include <gtest/gtest.h>

#include <random>

#include "slimfit/codec.hpp"

using namespace slimfit;

TEST(Quantize, HalfStepCodes) {
  EXPECT_EQ(quantize_value(0.5, kQ4_4), 8);
  EXPECT_EQ(quantize_value(0.0, kQ4_4), 0);
  EXPECT_EQ(quantize_value(10.0, kQ4_4), 127);
  EXPECT_EQ(quantize_value(-10.0, kQ4_4), -128);
  // 1/32 is exactly half a step; rounds away from zero.
  EXPECT_EQ(quantize_value(1.0 / 32, kQ4_4), 1);
  EXPECT_EQ(quantize_value(-1.0 / 32, kQ4_4), -1);
}

TEST(Quantize, Dequantize) {
  EXPECT_DOUBLE_EQ(dequantize_value(8, kQ4_4), 0.5);
  EXPECT_DOUBLE_EQ(dequantize_value(127, kQ4_4), 7.9375);
  EXPECT_DOUBLE_EQ(dequantize_value(0, kQ4_4), 0.0);
}

TEST(Quantize, ErrorBoundInRange) {
  std::mt19937_64 rng(3);
  for (const auto& spec : {kQ4_4, kQ2_2, kUQ0_8}) {
    std::uniform_real_distribution<double> u(spec.min_value(), spec.max_value());
    for (int i = 0; i < 10000; ++i) {
      const double x = u(rng);
      const double back = dequantize_value(quantize_value(x, spec), spec);
      EXPECT_LE(std::abs(back - x), std::ldexp(1.0, -spec.fractional_bits - 1) + 1e-15);
      EXPECT_EQ(quantize_value(back, spec), quantize_value(x, spec));
    }
  }
}

TEST(Quantize, RejectsBadSpec) {
  const std::vector<float> x{1.0f};
  EXPECT_THROW(quantize(std::span<const float>(x), FixedPointSpec{3, 2, true}), CodecError);
}

TEST(Pack4, ByteLayout) {
  const std::vector<std::int32_t> codes{3, -2};
  const auto bytes = pack4(codes);
  ASSERT_EQ(bytes.size(), 1u);
  EXPECT_EQ(bytes[0], 0xE3);
  EXPECT_TRUE(pack4({}).empty());
  const std::vector<std::int32_t> odd{-8, 7, 5};
  const auto b = pack4(odd);
  ASSERT_EQ(b.size(), 2u);
  EXPECT_EQ(b[1] >> 4, 0);
  EXPECT_EQ(unpack4(b, 3), odd);
}

TEST(Pack4, RoundTripAndRange) {
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> d(-8, 7);
  std::vector<std::int32_t> v(1001);
  for (auto& c : v) c = d(rng);
  EXPECT_EQ(unpack4(pack4(v), v.size()), v);
  EXPECT_THROW(pack4(std::vector<std::int32_t>{8}), CodecError);
  EXPECT_THROW(pack4(std::vector<std::int32_t>{-9}), CodecError);
  EXPECT_THROW(unpack4(std::vector<std::uint8_t>{0, 0}, 1), CodecError);
}

TEST(Prune, KeepsLargestMagnitude) {
  Tensor<float> x(Shape{10}, {0.1f, -5.f, 0.2f, 3.f, 0.f, 0.05f, 0.3f, -0.4f, 0.01f, 2.f});
  const auto p = prune_topk(x, 0.1);
  ASSERT_EQ(p.values.size(), 1u);
  EXPECT_EQ(p.indices[0], 1u);
  EXPECT_EQ(p.values[0], -5.f);
  const auto r = restore(p);
  for (Index i = 0; i < 10; ++i) EXPECT_EQ(r[i], i == 1 ? -5.f : 0.f);
}

TEST(Prune, SignedVariantAndTies) {
  Tensor<float> x(Shape{10}, {0.1f, -5.f, 0.2f, 3.f, 0.f, 0.05f, 0.3f, -0.4f, 0.01f, 2.f});
  const auto p = prune_topk(x, 0.1, false);
  EXPECT_EQ(p.indices[0], 3u);
  Tensor<float> flat = Tensor<float>::constant(Shape{20}, 1.5f);
  const auto q = prune_topk(flat, 0.1);
  EXPECT_EQ(q.indices, (std::vector<std::uint32_t>{0, 1}));
}

TEST(Prune, KeepAllIsLossless) {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n;
  Tensor<float> x(Shape{3, 7});
  for (Index i = 0; i < x.numel(); ++i) x[i] = n(rng);
  const auto r = restore(prune_topk(x, 1.0));
  EXPECT_EQ(r.shape(), x.shape());
  EXPECT_EQ(r.data(), x.data());
}

TEST(Prune, CountAndOrdering) {
  std::mt19937_64 rng(2);
  std::normal_distribution<float> n;
  for (Index len : {1, 9, 10, 11, 30, 257}) {
    Tensor<float> x(Shape{len});
    for (Index i = 0; i < len; ++i) x[i] = n(rng);
    const auto p = prune_topk(x, 0.1);
    const auto k = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(len) - 1e-9));
    EXPECT_EQ(p.values.size(), std::max<std::size_t>(k, 1));
    EXPECT_TRUE(std::is_sorted(p.indices.begin(), p.indices.end()));
    EXPECT_LE(restore(p).data().cwiseAbs().sum(), x.data().cwiseAbs().sum());
  }
  EXPECT_EQ(kept_count(0.1, 30), 3u);
  EXPECT_THROW(prune_topk(Tensor<float>(Shape{2}), 0.0), CodecError);
}

TEST(Compress, Packed4UsesPowerOfTwoScale) {
  Tensor<float> x(Shape{4}, {0.f, 3.f, -6.f, 0.25f});
  const auto c = compress(x, CodecSpec::fixed4());
  EXPECT_EQ(c.codes.size(), 2u);
  EXPECT_EQ(c.payload_bytes(), 2u);
  EXPECT_EQ(std::exp2(std::round(std::log2(c.scale))), c.scale);
  const auto d = decompress(c);
  EXPECT_EQ(c.scale, 2.0);
  for (Index i : {0, 1, 3}) EXPECT_NEAR(d[i], x[i], c.scale * 0.125 + 1e-6);
  // -6 lies above the 99.9th-percentile cut and saturates.
  EXPECT_EQ(d[2], -4.f);
}

TEST(Compress, PayloadBytes) {
  Tensor<float> x = Tensor<float>::constant(Shape{2, 50}, 0.3f);
  EXPECT_EQ(compress(x, CodecSpec::raw()).payload_bytes(), 400u);
  EXPECT_EQ(compress(x, CodecSpec::fixed8()).payload_bytes(), 100u);
  EXPECT_EQ(compress(x, CodecSpec::fixed4()).payload_bytes(), 50u);
  EXPECT_EQ(compress(x, CodecSpec::pruned(0.1)).payload_bytes(), 80u);
}

TEST(Serialize, RoundTripEveryCodec) {
  std::mt19937_64 rng(5);
  std::normal_distribution<float> n;
  Tensor<float> x(Shape{3, 5});
  for (Index i = 0; i < x.numel(); ++i) x[i] = n(rng);
  for (const auto& spec : {CodecSpec::raw(), CodecSpec::fixed8(), CodecSpec::fixed4(), CodecSpec::pruned(0.2)}) {
    const auto c = compress(x, spec);
    const auto bytes = serialize(c);
    const auto back = deserialize(bytes);
    EXPECT_EQ(back.tag, c.tag);
    EXPECT_EQ(back.shape, c.shape);
    EXPECT_EQ(decompress(back).data(), decompress(c).data());
  }
  auto bytes = serialize(compress(x, CodecSpec::fixed8()));
  bytes.pop_back();
  EXPECT_THROW(deserialize(bytes), CodecError);
}

TEST(Serialize, LittleEndianHeader) {
  Tensor<float> x(Shape{2}, {0.5f, -0.5f});
  const auto b = serialize(compress(x, CodecSpec::fixed8()));
  // tag, rank, dim0 (u32 LE), ib, fb, signed, scale (f32), count (u32 LE), codes
  ASSERT_EQ(b.size(), 1u + 1 + 4 + 3 + 4 + 4 + 2);
  EXPECT_EQ(b[0], 1);
  EXPECT_EQ(b[1], 1);
  EXPECT_EQ(b[2], 2);
  EXPECT_EQ(b[3], 0);
  EXPECT_EQ(b[b.size() - 2], 8);
  EXPECT_EQ(b[b.size() - 1], 0xF8);
}
