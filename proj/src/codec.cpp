#include "slimfit/codec.hpp"

#include <bit>
#include <cstring>

namespace slimfit {

std::int32_t quantize_value(double x, const FixedPointSpec& spec) {
  const double scaled = std::round(std::ldexp(x, spec.fractional_bits));
  if (std::isnan(scaled)) return 0;
  const double clamped = std::clamp(scaled, static_cast<double>(spec.min_code()),
                                    static_cast<double>(spec.max_code()));
  return static_cast<std::int32_t>(clamped);
}

std::vector<std::uint8_t> pack4(std::span<const std::int32_t> codes) {
  std::vector<std::uint8_t> out((codes.size() + 1) / 2, 0);
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const std::int32_t c = codes[i];
    if (c < -8 || c > 7) throw CodecError("4-bit code out of range: " + std::to_string(c));
    const auto nibble = static_cast<std::uint8_t>(c & 0xF);
    out[i / 2] |= (i % 2 == 0) ? nibble : static_cast<std::uint8_t>(nibble << 4);
  }
  return out;
}

std::vector<std::int32_t> unpack4(std::span<const std::uint8_t> bytes, std::size_t count) {
  if (bytes.size() != (count + 1) / 2) throw CodecError("packed 4-bit buffer has wrong length");
  std::vector<std::int32_t> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t nibble = (i % 2 == 0) ? (bytes[i / 2] & 0xF) : (bytes[i / 2] >> 4);
    out[i] = nibble >= 8 ? static_cast<std::int32_t>(nibble) - 16 : nibble;
  }
  return out;
}

const char* codec_name(Codec c) {
  switch (c) {
    case Codec::Raw: return "raw";
    case Codec::Quantized8: return "q8";
    case Codec::Packed4: return "q4";
    case Codec::PrunedSparse: return "pruned";
  }
  return "?";
}

std::size_t kept_count(double keep_fraction, std::size_t n) {
  const auto k = static_cast<std::size_t>(std::ceil(keep_fraction * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(k, 1, n);
}

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.insert(out.end(), buf, buf + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}
  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw CodecError("truncated compressed payload");
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }
  [[nodiscard]] bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize(const CompressedActivation<float>& c) {
  std::vector<std::uint8_t> out;
  put<std::uint8_t>(out, static_cast<std::uint8_t>(c.tag));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(c.shape.rank()));
  for (Index d : c.shape.dims()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  put<std::int8_t>(out, static_cast<std::int8_t>(c.spec.integer_bits));
  put<std::int8_t>(out, static_cast<std::int8_t>(c.spec.fractional_bits));
  put<std::uint8_t>(out, c.spec.is_signed ? 1 : 0);
  put<float>(out, static_cast<float>(c.scale));
  switch (c.tag) {
    case Codec::Raw:
      put<std::uint32_t>(out, static_cast<std::uint32_t>(c.values.size()));
      for (float v : c.values) put<float>(out, v);
      break;
    case Codec::Quantized8:
      put<std::uint32_t>(out, static_cast<std::uint32_t>(c.codes.size()));
      out.insert(out.end(), c.codes.begin(), c.codes.end());
      break;
    case Codec::Packed4:
      put<std::uint32_t>(out, static_cast<std::uint32_t>(c.shape.numel()));
      out.insert(out.end(), c.codes.begin(), c.codes.end());
      break;
    case Codec::PrunedSparse:
      put<std::uint32_t>(out, static_cast<std::uint32_t>(c.values.size()));
      for (float v : c.values) put<float>(out, v);
      for (std::uint32_t i : c.indices) put<std::uint32_t>(out, i);
      break;
  }
  return out;
}

CompressedActivation<float> deserialize(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  CompressedActivation<float> c;
  const auto tag = r.get<std::uint8_t>();
  if (tag > 3) throw CodecError("unknown codec tag");
  c.tag = static_cast<Codec>(tag);
  const auto rank = r.get<std::uint8_t>();
  std::vector<Index> dims(rank);
  for (auto& d : dims) d = r.get<std::uint32_t>();
  c.shape = Shape(std::move(dims));
  c.spec.integer_bits = r.get<std::int8_t>();
  c.spec.fractional_bits = r.get<std::int8_t>();
  c.spec.is_signed = r.get<std::uint8_t>() != 0;
  c.scale = r.get<float>();
  const auto count = r.get<std::uint32_t>();
  switch (c.tag) {
    case Codec::Raw:
      c.values.resize(count);
      for (auto& v : c.values) v = r.get<float>();
      break;
    case Codec::Quantized8:
      c.codes.resize(count);
      for (auto& b : c.codes) b = r.get<std::uint8_t>();
      break;
    case Codec::Packed4:
      c.codes.resize((count + 1) / 2);
      for (auto& b : c.codes) b = r.get<std::uint8_t>();
      break;
    case Codec::PrunedSparse:
      c.values.resize(count);
      c.indices.resize(count);
      for (auto& v : c.values) v = r.get<float>();
      for (auto& i : c.indices) i = r.get<std::uint32_t>();
      break;
  }
  if (!r.done()) throw CodecError("trailing bytes after compressed payload");
  return c;
}

}  // namespace slimfit
