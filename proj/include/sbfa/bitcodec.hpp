#pragma once

// Bit-exact codecs for the weight storage formats an attacker can flip:
// bfloat16, IEEE half, IEEE single and two's-complement int8.
//
// Bit positions are numbered LSB = 0 .. MSB = bit_width - 1 everywhere.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sbfa {

enum class Format : std::uint8_t { BF16, FP16, FP32, INT8 };

struct FormatSpec {
  Format format;
  int bit_width;
  // Zero for INT8.
  int sign_bits;
  int exponent_bits;
  int mantissa_bits;

  bool is_float() const { return exponent_bits > 0; }
  // The bit whose flip negates the value (MSB for every supported format).
  int sign_bit() const { return bit_width - 1; }
};

FormatSpec format_spec(Format f);

std::string_view format_name(Format f);
std::optional<Format> parse_format(std::string_view name);

class CodecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct BitWord {
  std::uint32_t raw = 0;
  Format format = Format::FP32;

  friend bool operator==(const BitWord&, const BitWord&) = default;
};

struct FlipOutcome {
  int bit_position = 0;
  // NaN/Inf when the flipped word decodes to a non-finite value.
  double new_value = 0.0;
  double delta = 0.0;
  bool finite = true;
};

/// Round-to-nearest-even encoding. Infinities map to the format's exact
/// infinity pattern. Throws CodecError for NaN, for finite values that
/// overflow the float format, and for INT8 values that are not integers in
/// [-128, 127].
BitWord encode(double value, Format format);

/// Exact decode; subnormals are kept, NaN and +-Inf are returned as such.
double decode(BitWord word);

inline BitWord flip_bit(BitWord word, int bit) {
  return {word.raw ^ (std::uint32_t{1} << bit), word.format};
}

/// One outcome per bit position, ordered by bit position.
std::vector<FlipOutcome> enumerate_flips(BitWord word);

/// Mask of the valid raw bits for a format.
inline std::uint32_t raw_mask(Format f) {
  const int w = format_spec(f).bit_width;
  return w == 32 ? 0xFFFFFFFFu : ((std::uint32_t{1} << w) - 1u);
}

}  // namespace sbfa
