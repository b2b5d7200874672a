#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sbfa/bitcodec.hpp"
#include "support.hpp"

namespace sbfa {
namespace {

// Reference decoders written independently of the library: bfloat16 is the
// upper half of a float32, half precision is expanded field by field.
double ref_bf16(std::uint32_t raw) {
  const std::uint32_t bits = raw << 16;
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

double ref_fp16(std::uint32_t raw) {
  const int s = (raw >> 15) & 1;
  const int e = (raw >> 10) & 0x1F;
  const int m = raw & 0x3FF;
  const double sign = s ? -1.0 : 1.0;
  if (e == 31) return m ? NAN : sign * INFINITY;
  if (e == 0) return sign * m * std::pow(2.0, -24);
  return sign * (1024 + m) * std::pow(2.0, e - 25);
}

bool same(double a, double b) {
  if (std::isnan(a) || std::isnan(b)) return std::isnan(a) && std::isnan(b);
  return a == b && std::signbit(a) == std::signbit(b);
}

TEST(BitCodec, FormatLayouts) {
  EXPECT_EQ(format_spec(Format::BF16).exponent_bits, 8);
  EXPECT_EQ(format_spec(Format::BF16).mantissa_bits, 7);
  EXPECT_EQ(format_spec(Format::FP16).exponent_bits, 5);
  EXPECT_EQ(format_spec(Format::FP16).mantissa_bits, 10);
  EXPECT_EQ(format_spec(Format::FP32).bit_width, 32);
  EXPECT_EQ(format_spec(Format::INT8).bit_width, 8);
  EXPECT_FALSE(format_spec(Format::INT8).is_float());
  for (auto f : {Format::BF16, Format::FP16, Format::FP32, Format::INT8}) {
    EXPECT_EQ(parse_format(format_name(f)), f);
  }
  EXPECT_FALSE(parse_format("fp8"));
}

TEST(BitCodec, HalfWorkedValues) {
  EXPECT_EQ(encode(0.5, Format::FP16).raw, 0b0'01110'0000000000u);
  EXPECT_EQ(decode({0b0'11110'0000000000u, Format::FP16}), 32768.0);
  EXPECT_EQ(decode({0b0'01110'0000000001u, Format::FP16}), 0.50048828125);
  EXPECT_EQ(decode({0b1'01110'0000000000u, Format::FP16}), -0.5);
}

TEST(BitCodec, BfloatAndIntWorkedValues) {
  EXPECT_EQ(encode(0.0, Format::BF16).raw, 0x0000u);
  EXPECT_EQ(encode(0.5, Format::BF16).raw, 0x3F00u);
  EXPECT_EQ(ref_bf16(0x3F00), 0.5);
  EXPECT_EQ(decode({0xFF, Format::INT8}), -1.0);
  EXPECT_EQ(encode(-1.0, Format::INT8).raw, 0xFFu);
  EXPECT_EQ(encode(-128.0, Format::INT8).raw, 0x80u);
}

TEST(BitCodec, SixteenBitRoundTripIsExhaustive) {
  for (auto f : {Format::FP16, Format::BF16}) {
    for (std::uint32_t raw = 0; raw < 0x10000; ++raw) {
      const double v = decode({raw, f});
      if (std::isnan(v)) continue;
      ASSERT_EQ(encode(v, f).raw, raw) << format_name(f) << " pattern " << raw;
    }
  }
}

TEST(BitCodec, DecodeMatchesReferenceDecoders) {
  for (std::uint32_t raw = 0; raw < 0x10000; ++raw) {
    ASSERT_TRUE(same(decode({raw, Format::FP16}), ref_fp16(raw))) << raw;
    ASSERT_TRUE(same(decode({raw, Format::BF16}), ref_bf16(raw))) << raw;
  }
}

TEST(BitCodec, Int8RoundTripIsExhaustive) {
  for (std::uint32_t raw = 0; raw < 0x100; ++raw) {
    const double v = decode({raw, Format::INT8});
    EXPECT_EQ(v, static_cast<double>(static_cast<std::int8_t>(raw)));
    EXPECT_EQ(encode(v, Format::INT8).raw, raw);
  }
  EXPECT_THROW(encode(0.5, Format::INT8), CodecError);
  EXPECT_THROW(encode(128.0, Format::INT8), CodecError);
}

TEST(BitCodec, RejectsNanAndOverflow) {
  EXPECT_THROW(encode(NAN, Format::FP32), CodecError);
  EXPECT_THROW(encode(INFINITY, Format::INT8), CodecError);
  EXPECT_EQ(encode(INFINITY, Format::BF16).raw, 0x7F80u);
  EXPECT_EQ(encode(-INFINITY, Format::FP16).raw, 0xFC00u);
  EXPECT_EQ(encode(INFINITY, Format::FP32).raw, 0x7F800000u);
  EXPECT_THROW(encode(65520.0, Format::FP16), CodecError);  // rounds past 65504
  EXPECT_EQ(decode(encode(65519.0, Format::FP16)), 65504.0);
}

TEST(BitCodec, MatchesGeneratedVectors) {
  std::ifstream in(testing::data_path("codec_vectors.txt"));
  ASSERT_TRUE(in) << "missing codec_vectors.txt";
  std::string line;
  int checked = 0;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::string op, fmt_name, a, b;
    ss >> op >> fmt_name >> a >> b;
    const Format f = *parse_format(fmt_name);
    if (op == "dec") {
      const auto raw = static_cast<std::uint32_t>(std::stoul(a, nullptr, 16));
      const double expected = b == "nan" ? NAN : std::strtod(b.c_str(), nullptr);
      ASSERT_TRUE(same(decode({raw, f}), expected)) << line;
    } else {
      const double value = std::strtod(a.c_str(), nullptr);
      const auto raw = static_cast<std::uint32_t>(std::stoul(b, nullptr, 16));
      ASSERT_EQ(encode(value, f).raw, raw) << line;
    }
    ++checked;
  }
  EXPECT_GT(checked, 10000);
}

TEST(BitCodec, FlipsOfHalfOneHalf) {
  const auto flips = enumerate_flips(encode(0.5, Format::FP16));
  ASSERT_EQ(flips.size(), 16u);
  EXPECT_EQ(flips[15].new_value, -0.5);
  EXPECT_EQ(flips[15].delta, -1.0);
  EXPECT_EQ(flips[14].new_value, 32768.0);
  EXPECT_EQ(flips[0].new_value, 0.50048828125);
  for (std::size_t i = 0; i < flips.size(); ++i) EXPECT_EQ(flips[i].bit_position, int(i));
}

TEST(BitCodec, FlipCountEqualsWidth) {
  EXPECT_EQ(enumerate_flips(encode(3.0, Format::FP32)).size(), 32u);
  EXPECT_EQ(enumerate_flips(encode(3.0, Format::BF16)).size(), 16u);
  EXPECT_EQ(enumerate_flips(encode(3.0, Format::INT8)).size(), 8u);
}

TEST(BitCodec, SingleOneHasExactlyOneNonFiniteFlip) {
  // Oracle: reinterpret every flipped pattern through float32 directly.
  const auto flips = enumerate_flips(encode(1.0, Format::FP32));
  int nonfinite = 0;
  for (const auto& f : flips) {
    const std::uint32_t bits = 0x3F800000u ^ (1u << f.bit_position);
    float ref;
    std::memcpy(&ref, &bits, sizeof ref);
    EXPECT_TRUE(same(f.new_value, ref));
    EXPECT_EQ(f.finite, std::isfinite(ref));
    if (!f.finite) {
      ++nonfinite;
      EXPECT_EQ(f.bit_position, 30);
      EXPECT_EQ(f.new_value, INFINITY);
    }
  }
  EXPECT_EQ(nonfinite, 1);
}

TEST(BitCodec, SignFlipNegatesAndFlipIsInvolution) {
  for (double w : {0.5, -3.25, 1e-3, 100.0}) {
    for (auto f : {Format::BF16, Format::FP16, Format::FP32}) {
      const BitWord word = encode(w, f);
      const int sign = format_spec(f).sign_bit();
      const double v = decode(word);
      EXPECT_EQ(enumerate_flips(word)[static_cast<std::size_t>(sign)].delta, -2.0 * v);
      for (int bit = 0; bit < format_spec(f).bit_width; ++bit) {
        EXPECT_EQ(flip_bit(flip_bit(word, bit), bit), word);
      }
    }
  }
}

TEST(BitCodec, Int8SignBitFlip) {
  const auto flips = enumerate_flips(encode(64.0, Format::INT8));
  EXPECT_EQ(flips[7].new_value, -64.0);
  EXPECT_EQ(flips[6].new_value, 0.0);
}

}  // namespace
}  // namespace sbfa
