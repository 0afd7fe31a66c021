#pragma once

// Independent reference implementations used as test oracles. None of these
// call into the library's own helpers.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <vector>

namespace oracle {

inline std::uint32_t bits_of(float x) {
  std::uint32_t u;
  std::memcpy(&u, &x, sizeof u);
  return u;
}

inline float float_of(std::uint32_t u) {
  float x;
  std::memcpy(&x, &u, sizeof x);
  return x;
}

/// Rounds a binary32 pattern to bfloat16 by inspecting the guard bit (bit 15),
/// and the sticky OR of bits 0..14, then applying ties-to-even on bit 16.
inline std::uint16_t bf16_bits(float x) {
  const std::uint32_t u = bits_of(x);
  const std::uint32_t exponent = (u >> 23) & 0xffu;
  const std::uint32_t fraction = u & 0x7fffffu;
  if (exponent == 0xffu) {
    if (fraction != 0) return static_cast<std::uint16_t>((u >> 16) | 0x40u);  // quiet NaN
    return static_cast<std::uint16_t>(u >> 16);
  }
  std::uint32_t upper = u >> 16;
  const bool guard = (u >> 15) & 1u;
  const bool sticky = (u & 0x7fffu) != 0;
  const bool lsb = upper & 1u;
  if (guard && (sticky || lsb)) ++upper;  // carries into the exponent naturally
  return static_cast<std::uint16_t>(upper);
}

inline float sequential_sum(const std::vector<float>& a, const std::vector<float>& b) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

/// Chunked reduction written out longhand: chunk c covers
/// [c*q + min(c, r), (c+1)*q + min(c+1, r)).
inline float chunked_sum(const std::vector<float>& a, const std::vector<float>& b, int chunks) {
  const std::size_t n = a.size();
  const std::size_t c = std::clamp<std::size_t>(static_cast<std::size_t>(chunks), 1, std::max<std::size_t>(n, 1));
  const std::size_t q = n / c, r = n % c;
  float total = 0.0f;
  for (std::size_t i = 0; i < c; ++i) {
    const std::size_t lo = i * q + std::min(i, r);
    const std::size_t hi = (i + 1) * q + std::min(i + 1, r);
    float part = 0.0f;
    for (std::size_t j = lo; j < hi; ++j) part += a[j] * b[j];
    total += part;
  }
  return total;
}

/// Naive flip accounting straight from token lists.
struct FlipCount {
  long long events = 0;
  long long sync = 0;
};

inline FlipCount naive_flips(const std::vector<std::vector<int>>& batched, const std::vector<std::vector<int>>& ref) {
  FlipCount f;
  for (std::size_t t = 0; t < batched.size(); ++t) {
    const auto& b = batched[t];
    const auto& r = ref[t];
    const std::size_t n = std::max(b.size(), r.size());
    std::size_t i = 0;
    for (; i < n; ++i) {
      const bool differ = i >= b.size() || i >= r.size() || b[i] != r[i];
      if (differ) break;
    }
    if (i < n) {
      f.events += 1;
      f.sync += static_cast<long long>(i) + 1;
    } else {
      f.sync += static_cast<long long>(n);
    }
  }
  return f;
}

/// Counts logits within delta of the maximum over the full vector.
inline int naive_count_within(const std::vector<float>& values, double delta) {
  const double top = *std::max_element(values.begin(), values.end());
  int n = 0;
  for (float v : values) n += static_cast<double>(v) >= top - delta ? 1 : 0;
  return n;
}

/// 1-based rank by full sort (value descending, id ascending).
inline std::optional<int> naive_rank(const std::vector<float>& values, int token, int window) {
  std::vector<int> idx(values.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return values[a] > values[b]; });
  for (int i = 0; i < std::min<int>(window, static_cast<int>(idx.size())); ++i) {
    if (idx[i] == token) return i + 1;
  }
  return std::nullopt;
}

/// Textbook OLS slope, n*Sxy - Sx*Sy over n*Sxx - Sx^2. Exact sums for
/// dyadic data; the final quotient is formed in double.
inline double naive_slope(const std::vector<double>& x, const std::vector<double>& y) {
  long double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const long double n = static_cast<long double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += static_cast<long double>(x[i]) * x[i];
    sxy += static_cast<long double>(x[i]) * y[i];
  }
  return static_cast<double>(n * sxy - sx * sy) / static_cast<double>(n * sxx - sx * sx);
}

inline double naive_recall(const std::vector<double>& margins, double tau) {
  double hits = 0;
  for (double m : margins) hits += m < tau ? 1 : 0;
  return hits / static_cast<double>(margins.size());
}

}  // namespace oracle
