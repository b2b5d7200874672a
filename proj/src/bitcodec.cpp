#include "sbfa/bitcodec.hpp"

#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace sbfa {

FormatSpec format_spec(Format f) {
  switch (f) {
    case Format::BF16:
      return {f, 16, 1, 8, 7};
    case Format::FP16:
      return {f, 16, 1, 5, 10};
    case Format::FP32:
      return {f, 32, 1, 8, 23};
    case Format::INT8:
      return {f, 8, 0, 0, 0};
  }
  throw CodecError("unknown format");
}

std::string_view format_name(Format f) {
  switch (f) {
    case Format::BF16:
      return "bf16";
    case Format::FP16:
      return "fp16";
    case Format::FP32:
      return "fp32";
    case Format::INT8:
      return "int8";
  }
  return "?";
}

std::optional<Format> parse_format(std::string_view name) {
  if (name == "bf16") return Format::BF16;
  if (name == "fp16") return Format::FP16;
  if (name == "fp32") return Format::FP32;
  if (name == "int8") return Format::INT8;
  return std::nullopt;
}

namespace {

BitWord encode_float(double value, const FormatSpec& spec) {
  const int mbits = spec.mantissa_bits;
  const int bias = (1 << (spec.exponent_bits - 1)) - 1;
  const int exp_all_ones = (1 << spec.exponent_bits) - 1;
  const std::uint32_t sign = std::signbit(value) ? 1u : 0u;
  const std::uint32_t sign_field = sign << (spec.bit_width - 1);
  const double a = std::fabs(value);
  if (a == 0.0) return {sign_field, spec.format};

  int e2 = 0;
  std::frexp(a, &e2);  // a = f * 2^e2, f in [0.5, 1)
  int exponent = e2 - 1;
  const int min_normal_exp = 1 - bias;

  if (exponent < min_normal_exp) {
    // Scaling by a power of two is exact, nearbyint rounds to nearest even.
    const double q = std::nearbyint(std::ldexp(a, -(min_normal_exp - mbits)));
    // q == 2^mbits lands exactly on the smallest normal encoding.
    return {sign_field | static_cast<std::uint32_t>(q), spec.format};
  }

  double q = std::nearbyint(std::ldexp(a, -(exponent - mbits)));
  if (q == std::ldexp(1.0, mbits + 1)) {
    q /= 2.0;
    ++exponent;
  }
  const int biased = exponent + bias;
  if (biased >= exp_all_ones) {
    throw CodecError(fmt::format("value {} overflows {}", value, format_name(spec.format)));
  }
  const auto mantissa = static_cast<std::uint32_t>(q) - (std::uint32_t{1} << mbits);
  return {sign_field | (static_cast<std::uint32_t>(biased) << mbits) | mantissa, spec.format};
}

double decode_float(std::uint32_t raw, const FormatSpec& spec) {
  const int mbits = spec.mantissa_bits;
  const int bias = (1 << (spec.exponent_bits - 1)) - 1;
  const std::uint32_t exp_all_ones = (1u << spec.exponent_bits) - 1u;
  const bool negative = (raw >> (spec.bit_width - 1)) & 1u;
  const std::uint32_t exponent = (raw >> mbits) & exp_all_ones;
  const std::uint32_t mantissa = raw & ((1u << mbits) - 1u);

  double magnitude;
  if (exponent == exp_all_ones) {
    if (mantissa != 0) return std::numeric_limits<double>::quiet_NaN();
    magnitude = std::numeric_limits<double>::infinity();
  } else if (exponent == 0) {
    magnitude = std::ldexp(static_cast<double>(mantissa), 1 - bias - mbits);
  } else {
    magnitude = std::ldexp(static_cast<double>((1u << mbits) | mantissa),
                           static_cast<int>(exponent) - bias - mbits);
  }
  return negative ? -magnitude : magnitude;
}

}  // namespace

BitWord encode(double value, Format format) {
  if (std::isnan(value)) throw CodecError("cannot encode NaN");
  const FormatSpec spec = format_spec(format);
  if (spec.is_float()) {
    if (std::isinf(value)) {
      // Infinity is exactly representable: all-ones exponent, zero mantissa.
      const std::uint32_t sign = value < 0 ? std::uint32_t{1} << spec.sign_bit() : 0u;
      const std::uint32_t exp = ((1u << spec.exponent_bits) - 1u) << spec.mantissa_bits;
      return {sign | exp, format};
    }
    return encode_float(value, spec);
  }

  if (value != std::trunc(value) || value < -128.0 || value > 127.0) {
    throw CodecError(fmt::format("{} is not an int8 value", value));
  }
  const auto v = static_cast<std::int8_t>(value);
  return {static_cast<std::uint8_t>(v), format};
}

double decode(BitWord word) {
  const FormatSpec spec = format_spec(word.format);
  const std::uint32_t raw = word.raw & raw_mask(word.format);
  if (spec.is_float()) return decode_float(raw, spec);
  return static_cast<double>(static_cast<std::int8_t>(static_cast<std::uint8_t>(raw)));
}

std::vector<FlipOutcome> enumerate_flips(BitWord word) {
  const int width = format_spec(word.format).bit_width;
  const double old_value = decode(word);
  std::vector<FlipOutcome> out;
  out.reserve(static_cast<std::size_t>(width));
  for (int bit = 0; bit < width; ++bit) {
    const double v = decode(flip_bit(word, bit));
    const bool finite = std::isfinite(v);
    out.push_back({bit, v, v - old_value, finite});
  }
  return out;
}

}  // namespace sbfa
