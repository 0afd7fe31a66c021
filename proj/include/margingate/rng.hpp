#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace margingate {

/// SplitMix64 (Steele, Lea, Flood). The only random stream in the project:
/// model weights, corpora and injected noise all derive from it.
class SplitMix64 {
 public:
  explicit constexpr SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  constexpr std::uint64_t next() noexcept {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  /// Uniform in (0, 1], 53-bit resolution.
  double uniform_open0() noexcept {
    return (static_cast<double>(next() >> 11) + 1.0) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n) by rejection-free multiply-shift.
  std::uint64_t below(std::uint64_t n) noexcept {
    const unsigned __int128 wide = static_cast<unsigned __int128>(next()) * n;
    return static_cast<std::uint64_t>(wide >> 64);
  }

 private:
  std::uint64_t state_;
};

/// Box-Muller pairs on top of SplitMix64. Both outputs of each pair are used.
class GaussianStream {
 public:
  explicit GaussianStream(std::uint64_t seed) noexcept : rng_(seed) {}

  double next() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = rng_.uniform_open0();
    const double u2 = rng_.uniform_open0();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  SplitMix64 rng_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// Order-sensitive 64-bit hash combine used to key stateless noise draws.
constexpr std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) noexcept {
  return SplitMix64::mix(h ^ (v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2)));
}

}  // namespace margingate
