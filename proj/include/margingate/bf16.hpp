#pragma once

#include <bit>
#include <cstdint>

namespace margingate {

/// Storage-only bfloat16: 1 sign bit, 8 exponent bits, 7 mantissa bits.
/// Arithmetic happens in 32-bit after widening; results come back through
/// round_to_bf16.
struct Bf16 {
  std::uint16_t bits = 0;

  static constexpr Bf16 from_bits(std::uint16_t b) noexcept { return Bf16{b}; }

  constexpr float to_float() const noexcept {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
  }

  friend constexpr bool operator==(Bf16, Bf16) noexcept = default;
};

/// Round-to-nearest, ties-to-even. NaN becomes a quiet NaN with the input
/// sign, infinities pass through, values past the largest finite bf16
/// overflow to infinity.
constexpr Bf16 round_to_bf16(float x) noexcept {
  const std::uint32_t u = std::bit_cast<std::uint32_t>(x);
  if ((u & 0x7f800000u) == 0x7f800000u && (u & 0x007fffffu) != 0) {
    return Bf16::from_bits(static_cast<std::uint16_t>((u >> 16) | 0x0040u));
  }
  const std::uint32_t bias = 0x7fffu + ((u >> 16) & 1u);
  return Bf16::from_bits(static_cast<std::uint16_t>((u + bias) >> 16));
}

/// x rounded to the nearest bf16, widened back to float.
constexpr float bf16_quantize(float x) noexcept { return round_to_bf16(x).to_float(); }

}  // namespace margingate
