#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

#include "slimfit/tensor.hpp"

namespace slimfit {

struct CodecError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Fixed-point format with `integer_bits` + `fractional_bits` = 4 or 8.
struct FixedPointSpec {
  int integer_bits = 4;
  int fractional_bits = 4;
  bool is_signed = true;

  [[nodiscard]] int total_bits() const { return integer_bits + fractional_bits; }
  [[nodiscard]] std::int32_t min_code() const {
    return is_signed ? -(std::int32_t{1} << (total_bits() - 1)) : 0;
  }
  [[nodiscard]] std::int32_t max_code() const {
    return is_signed ? (std::int32_t{1} << (total_bits() - 1)) - 1 : (std::int32_t{1} << total_bits()) - 1;
  }
  [[nodiscard]] double resolution() const { return std::ldexp(1.0, -fractional_bits); }
  [[nodiscard]] double min_value() const { return min_code() * resolution(); }
  [[nodiscard]] double max_value() const { return max_code() * resolution(); }
  void validate() const {
    if (integer_bits < 0 || fractional_bits < 0 || (total_bits() != 4 && total_bits() != 8))
      throw CodecError("fixed-point spec needs integer+fractional bits of 4 or 8");
  }
  bool operator==(const FixedPointSpec&) const = default;
};

inline constexpr FixedPointSpec kQ4_4{4, 4, true};
inline constexpr FixedPointSpec kQ2_2{2, 2, true};
inline constexpr FixedPointSpec kUQ0_8{0, 8, false};

/// clamp(round(x * 2^fb), min, max); round is half away from zero.
std::int32_t quantize_value(double x, const FixedPointSpec& spec);
inline double dequantize_value(std::int32_t code, const FixedPointSpec& spec) {
  return std::ldexp(static_cast<double>(code), -spec.fractional_bits);
}

template <typename Scalar>
std::vector<std::int32_t> quantize(std::span<const Scalar> x, const FixedPointSpec& spec,
                                   double scale = 1.0) {
  spec.validate();
  std::vector<std::int32_t> codes(x.size());
  // Multiplying by 2^fb is exact, so this matches quantize_value element for element.
  const double mul = std::ldexp(1.0, spec.fractional_bits);
  const double lo = spec.min_code(), hi = spec.max_code();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = std::round(static_cast<double>(x[i]) / scale * mul);
    codes[i] = std::isnan(v) ? 0 : static_cast<std::int32_t>(std::clamp(v, lo, hi));
  }
  return codes;
}

template <typename Scalar>
std::vector<Scalar> dequantize(std::span<const std::int32_t> codes, const FixedPointSpec& spec,
                               double scale = 1.0) {
  std::vector<Scalar> out(codes.size());
  const double step = spec.resolution();
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = static_cast<Scalar>(codes[i] * step * scale);
  return out;
}

/// Two 4-bit two's-complement codes per byte: even index in the low nibble.
std::vector<std::uint8_t> pack4(std::span<const std::int32_t> codes);
std::vector<std::int32_t> unpack4(std::span<const std::uint8_t> bytes, std::size_t count);

enum class Codec : std::uint8_t { Raw = 0, Quantized8 = 1, Packed4 = 2, PrunedSparse = 3 };

const char* codec_name(Codec c);

/// How a cached activation should be stored.
struct CodecSpec {
  Codec kind = Codec::Raw;
  FixedPointSpec fixed = kQ4_4;
  // Packed4 only: choose a power-of-two pre-scale so the 99.9th percentile
  // magnitude is representable.
  bool auto_scale = false;
  double keep_fraction = 0.1;
  bool by_magnitude = true;

  static CodecSpec raw() { return {}; }
  static CodecSpec fixed8(FixedPointSpec s = kQ4_4) { return {Codec::Quantized8, s, false, 0.1, true}; }
  static CodecSpec fixed4(FixedPointSpec s = kQ2_2) { return {Codec::Packed4, s, true, 0.1, true}; }
  static CodecSpec pruned(double keep = 0.1, bool magnitude = true) {
    return {Codec::PrunedSparse, kQ4_4, false, keep, magnitude};
  }
  bool operator==(const CodecSpec&) const = default;
};

/// ceil(keep_fraction * n), guarded against representation error (0.1 * 30).
std::size_t kept_count(double keep_fraction, std::size_t n);

template <typename Scalar>
struct CompressedActivation {
  Codec tag = Codec::Raw;
  Shape shape;
  FixedPointSpec spec = kQ4_4;
  double scale = 1.0;
  std::vector<std::uint8_t> codes;      // Quantized8 / Packed4
  std::vector<Scalar> values;           // PrunedSparse values or Raw data
  std::vector<std::uint32_t> indices;   // PrunedSparse flat indices, strictly increasing

  /// Bytes of payload (headers excluded).
  [[nodiscard]] std::size_t payload_bytes() const {
    return codes.size() + values.size() * sizeof(Scalar) + indices.size() * sizeof(std::uint32_t);
  }
};

template <typename Scalar>
CompressedActivation<Scalar> prune_topk(const Tensor<Scalar>& x, double keep_fraction = 0.1,
                                        bool by_magnitude = true) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
    throw CodecError("keep fraction must lie in (0, 1]");
  const auto n = static_cast<std::size_t>(x.numel());
  if (n == 0) throw CodecError("cannot prune an empty tensor");
  const std::size_t k = kept_count(keep_fraction, n);

  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  const auto& d = x.data();
  auto key = [&](std::uint32_t i) {
    return by_magnitude ? std::abs(d[i]) : d[i];
  };
  auto before = [&](std::uint32_t a, std::uint32_t b) {
    const Scalar ka = key(a), kb = key(b);
    return ka > kb || (ka == kb && a < b);
  };
  if (k < n) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), before);
  order.resize(k);
  std::sort(order.begin(), order.end());

  CompressedActivation<Scalar> out;
  out.tag = Codec::PrunedSparse;
  out.shape = x.shape();
  out.indices = std::move(order);
  out.values.reserve(k);
  for (std::uint32_t i : out.indices) out.values.push_back(d[i]);
  return out;
}

template <typename Scalar>
Tensor<Scalar> restore(const CompressedActivation<Scalar>& sparse) {
  if (sparse.tag != Codec::PrunedSparse) throw CodecError("restore expects a pruned payload");
  if (sparse.values.size() != sparse.indices.size())
    throw CodecError("pruned payload has mismatched values and indices");
  Tensor<Scalar> out(sparse.shape);
  for (std::size_t j = 0; j < sparse.indices.size(); ++j) {
    if (sparse.indices[j] >= static_cast<std::uint32_t>(out.numel()))
      throw CodecError("pruned index out of range");
    out[sparse.indices[j]] = sparse.values[j];
  }
  return out;
}

/// Power-of-two scale s such that |x| quantile `q` divided by s fits the spec.
template <typename Scalar>
double power_of_two_scale(const Tensor<Scalar>& x, const FixedPointSpec& spec, double q = 0.999) {
  std::vector<double> mags(static_cast<std::size_t>(x.numel()));
  for (Index i = 0; i < x.numel(); ++i) mags[static_cast<std::size_t>(i)] = std::abs(static_cast<double>(x[i]));
  if (mags.empty()) return 1.0;
  const auto pos = static_cast<std::size_t>(std::floor(q * static_cast<double>(mags.size() - 1)));
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(pos), mags.end());
  const double p = mags[pos];
  if (!(p > 0.0) || !std::isfinite(p)) return 1.0;
  return std::exp2(std::ceil(std::log2(p / spec.max_value())));
}

template <typename Scalar>
CompressedActivation<Scalar> compress(const Tensor<Scalar>& x, const CodecSpec& codec) {
  CompressedActivation<Scalar> out;
  out.shape = x.shape();
  out.tag = codec.kind;
  const std::span<const Scalar> data(x.data().data(), static_cast<std::size_t>(x.numel()));
  switch (codec.kind) {
    case Codec::Raw:
      out.values.assign(data.begin(), data.end());
      break;
    case Codec::Quantized8: {
      if (codec.fixed.total_bits() != 8) throw CodecError("8-bit codec needs an 8-bit spec");
      out.spec = codec.fixed;
      const auto c = quantize(data, codec.fixed);
      out.codes.resize(c.size());
      for (std::size_t i = 0; i < c.size(); ++i) out.codes[i] = static_cast<std::uint8_t>(c[i] & 0xFF);
      break;
    }
    case Codec::Packed4: {
      if (codec.fixed.total_bits() != 4 || !codec.fixed.is_signed)
        throw CodecError("4-bit codec needs a signed 4-bit spec");
      out.spec = codec.fixed;
      out.scale = codec.auto_scale ? power_of_two_scale(x, codec.fixed) : 1.0;
      out.codes = pack4(quantize(data, codec.fixed, out.scale));
      break;
    }
    case Codec::PrunedSparse:
      return prune_topk(x, codec.keep_fraction, codec.by_magnitude);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> decompress(const CompressedActivation<Scalar>& c) {
  Tensor<Scalar> out(c.shape);
  const auto n = static_cast<std::size_t>(out.numel());
  switch (c.tag) {
    case Codec::Raw:
      if (c.values.size() != n) throw CodecError("raw payload size mismatch");
      for (std::size_t i = 0; i < n; ++i) out[static_cast<Index>(i)] = c.values[i];
      break;
    case Codec::Quantized8: {
      if (c.codes.size() != n) throw CodecError("8-bit payload size mismatch");
      const double step = c.spec.resolution();
      for (std::size_t i = 0; i < n; ++i) {
        const std::int32_t code = c.spec.is_signed ? static_cast<std::int32_t>(static_cast<std::int8_t>(c.codes[i]))
                                                   : static_cast<std::int32_t>(c.codes[i]);
        out[static_cast<Index>(i)] = static_cast<Scalar>(code * step * c.scale);
      }
      break;
    }
    case Codec::Packed4: {
      const auto codes = unpack4(c.codes, n);
      const double step = c.spec.resolution();
      for (std::size_t i = 0; i < n; ++i) out[static_cast<Index>(i)] = static_cast<Scalar>(codes[i] * step * c.scale);
      break;
    }
    case Codec::PrunedSparse:
      return restore(c);
  }
  return out;
}

/// Little-endian dump layout:
///   u8 tag | u8 rank | rank x u32 dims | i8 ib | i8 fb | u8 signed | f32 scale
///   | u32 count | payload
/// payload: Quantized8 -> count bytes; Packed4 -> ceil(count/2) bytes;
///          PrunedSparse -> count f32 values then count u32 indices;
///          Raw -> count f32 values.
std::vector<std::uint8_t> serialize(const CompressedActivation<float>& c);
CompressedActivation<float> deserialize(std::span<const std::uint8_t> bytes);

}  // namespace slimfit
