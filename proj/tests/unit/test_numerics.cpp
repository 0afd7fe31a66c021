#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "margingate/errors.hpp"
#include "margingate/numerics.hpp"
#include "oracles.hpp"

using namespace margingate;

namespace {

std::vector<float> random_bf16_vector(std::mt19937_64& rng, std::size_t n, float scale = 1.0f) {
  std::normal_distribution<float> dist(0.0f, scale);
  std::vector<float> v(n);
  for (auto& x : v) x = bf16_quantize(dist(rng));
  return v;
}

std::vector<Bf16> to_bf16(const std::vector<float>& v) {
  std::vector<Bf16> out;
  for (float x : v) out.push_back(round_to_bf16(x));
  return out;
}

}  // namespace

TEST(RoundToBf16, WorkedExamples) {
  EXPECT_EQ(bf16_quantize(1.0f), 1.0f);
  EXPECT_EQ(bf16_quantize(1.00390625f), 1.0f);
  EXPECT_EQ(bf16_quantize(3.14159f), 3.140625f);
  EXPECT_EQ(oracle::bf16_bits(1.00390625f), round_to_bf16(1.00390625f).bits);
  EXPECT_EQ(oracle::bf16_bits(3.14159f), round_to_bf16(3.14159f).bits);
}

TEST(RoundToBf16, TiesGoToEven) {
  // 1 + 3*2^-8 sits halfway between 1 + 2^-7 (odd) and 1 + 2^-6 (even).
  EXPECT_EQ(bf16_quantize(1.01171875f), 1.015625f);
  EXPECT_EQ(bf16_quantize(-1.00390625f), -1.0f);
  // Just above the halfway point rounds up.
  EXPECT_EQ(bf16_quantize(std::nextafter(1.00390625f, 2.0f)), 1.0078125f);
}

TEST(RoundToBf16, SpecialValues) {
  const float inf = std::numeric_limits<float>::infinity();
  EXPECT_EQ(bf16_quantize(inf), inf);
  EXPECT_EQ(bf16_quantize(-inf), -inf);
  EXPECT_EQ(bf16_quantize(std::numeric_limits<float>::max()), inf);
  EXPECT_EQ(bf16_quantize(-std::numeric_limits<float>::max()), -inf);
  const Bf16 nan = round_to_bf16(std::numeric_limits<float>::quiet_NaN());
  EXPECT_TRUE(std::isnan(nan.to_float()));
  const Bf16 snan = round_to_bf16(oracle::float_of(0x7f800001u));
  EXPECT_TRUE(std::isnan(snan.to_float()));
  EXPECT_NE(snan.bits & 0x0040u, 0u);
  EXPECT_EQ(round_to_bf16(0.0f).bits, 0x0000u);
  EXPECT_EQ(round_to_bf16(-0.0f).bits, 0x8000u);
}

TEST(RoundToBf16, MatchesBitOracleOnBoundaries) {
  std::vector<std::uint32_t> patterns;
  for (std::uint32_t exp = 0; exp < 256; ++exp) {
    for (std::uint32_t sign : {0u, 1u}) {
      const std::uint32_t base = (sign << 31) | (exp << 23);
      for (std::uint32_t mant_hi : {0x000000u, 0x010000u, 0x7f0000u, 0x7e0000u}) {
        for (std::uint32_t low : {0x0000u, 0x0001u, 0x7fffu, 0x8000u, 0x8001u, 0xffffu}) {
          patterns.push_back(base | mant_hi | low);
        }
      }
    }
  }
  for (std::uint32_t u : patterns) {
    const float x = oracle::float_of(u);
    ASSERT_EQ(round_to_bf16(x).bits, oracle::bf16_bits(x)) << std::hex << u;
  }
}

TEST(RoundToBf16, MatchesBitOracleOnRandomPatterns) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 200000; ++i) {
    const auto u = static_cast<std::uint32_t>(rng());
    const float x = oracle::float_of(u);
    ASSERT_EQ(round_to_bf16(x).bits, oracle::bf16_bits(x)) << std::hex << u;
  }
}

TEST(RoundToBf16, IdempotentAndLossless) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 100000; ++i) {
    const float x = oracle::float_of(static_cast<std::uint32_t>(rng()));
    if (!std::isfinite(x)) continue;
    const Bf16 once = round_to_bf16(x);
    EXPECT_EQ(round_to_bf16(once.to_float()).bits, once.bits);
  }
  for (std::uint32_t b = 0; b < 0x10000u; ++b) {
    const Bf16 v = Bf16::from_bits(static_cast<std::uint16_t>(b));
    if (std::isnan(v.to_float())) continue;
    ASSERT_EQ(round_to_bf16(v.to_float()).bits, v.bits);
  }
}

TEST(ReductionPlan, PartitionIsContiguousAndCovering) {
  for (std::size_t n : {1u, 2u, 7u, 16u, 64u, 100u}) {
    for (int c = 1; c <= 20; ++c) {
      const ReductionPlan plan(n, c);
      EXPECT_EQ(plan.chunk_count(), std::min<int>(c, static_cast<int>(n)));
      EXPECT_EQ(plan.chunk_begin(0), 0u);
      EXPECT_EQ(plan.chunk_end(plan.chunk_count() - 1), n);
      std::size_t smallest = n, largest = 0;
      for (int i = 0; i < plan.chunk_count(); ++i) {
        const std::size_t size = plan.chunk_end(i) - plan.chunk_begin(i);
        EXPECT_GT(size, 0u);
        if (i + 1 < plan.chunk_count()) {
          EXPECT_EQ(plan.chunk_end(i), plan.chunk_begin(i + 1));
          EXPECT_GE(size, plan.chunk_end(i + 1) - plan.chunk_begin(i + 1));
        }
        smallest = std::min(smallest, size);
        largest = std::max(largest, size);
      }
      EXPECT_LE(largest - smallest, 1u);
    }
  }
}

TEST(ChunkedDot, OneHotGivesOne) {
  for (int hot = 0; hot < 16; ++hot) {
    std::vector<float> e(16, 0.0f);
    e[hot] = 1.0f;
    for (int c : {1, 3, 8, 16}) EXPECT_EQ(chunked_dot(to_bf16(e), to_bf16(e), ReductionPlan(16, c)), 1.0f);
  }
}

TEST(ChunkedDot, CancellationDependsOnOrder) {
  const float big = bf16_quantize(1e8f);
  const std::vector<float> a{big, 1.0f, -big, 1.0f};
  const std::vector<float> ones(4, 1.0f);
  // Sequential: the first 1.0 is absorbed by big, the second survives.
  const float seq = chunked_dot(to_bf16(a), to_bf16(ones), ReductionPlan(4, 1));
  // Two chunks: (big + 1) + (-big + 1) absorbs both.
  const float two = chunked_dot(to_bf16(a), to_bf16(ones), ReductionPlan(4, 2));
  EXPECT_EQ(seq, oracle::sequential_sum(a, ones));
  EXPECT_EQ(two, oracle::chunked_sum(a, ones, 2));
  EXPECT_EQ(seq, 1.0f);
  EXPECT_EQ(two, 0.0f);
  EXPECT_NE(seq, two);
}

TEST(ChunkedDot, SingleChunkEqualsSequentialSum) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20000; ++trial) {
    const std::size_t n = 1 + rng() % 200;
    const auto a = random_bf16_vector(rng, n, 4.0f);
    const auto b = random_bf16_vector(rng, n, 4.0f);
    const float expect = oracle::sequential_sum(a, b);
    ASSERT_EQ(chunked_dot(to_bf16(a), to_bf16(b), ReductionPlan(n, 1)), expect);
    ASSERT_EQ(chunked_dot(to_bf16(a), to_bf16(b), ReductionPlan(n, static_cast<int>(n))), expect);
  }
}

TEST(ChunkedDot, MatchesLonghandChunkedSum) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 5000; ++trial) {
    const std::size_t n = 1 + rng() % 300;
    const int c = 1 + static_cast<int>(rng() % 20);
    const auto a = random_bf16_vector(rng, n);
    const auto b = random_bf16_vector(rng, n);
    ASSERT_EQ(chunked_dot(std::span<const float>(a), std::span<const float>(b), ReductionPlan(n, c)),
              oracle::chunked_sum(a, b, c));
  }
}

TEST(ChunkedDot, PerturbationIsBounded) {
  std::mt19937_64 rng(9);
  double worst = 0.0;
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = 1 + rng() % 4096;
    const int c = 1 + static_cast<int>(rng() % 16);
    const auto a = random_bf16_vector(rng, n);
    const auto b = random_bf16_vector(rng, n);
    double abs_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) abs_sum += std::fabs(static_cast<double>(a[i]) * b[i]);
    const double diff = std::fabs(static_cast<double>(chunked_dot(to_bf16(a), to_bf16(b), ReductionPlan(n, c))) -
                                  chunked_dot(to_bf16(a), to_bf16(b), ReductionPlan(n, 1)));
    worst = std::max(worst, diff / (abs_sum + 1.0));
  }
  EXPECT_LT(worst, std::ldexp(1.0, -6));
}

TEST(ChunkedDot, LengthMismatchThrows) {
  const std::vector<Bf16> a(4), b(5);
  EXPECT_THROW(chunked_dot(a, b, ReductionPlan(4, 1)), InvalidArgument);
  EXPECT_THROW(chunked_dot(a, a, ReductionPlan(5, 1)), InvalidArgument);
}

TEST(ChunkedMatvec, MatchesPerRowDot) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 1 + rng() % 40;
    const std::size_t cols = 1 + rng() % 70;
    const int chunks = 1 + static_cast<int>(rng() % 10);
    const auto w = random_bf16_vector(rng, rows * cols);
    const auto x = random_bf16_vector(rng, cols);
    std::vector<float> w_t(rows * cols);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t k = 0; k < cols; ++k) w_t[k * rows + r] = w[r * cols + k];
    }
    std::vector<float> out(rows);
    chunked_matvec_t(w_t, rows, x, chunks, out);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::vector<float> row(w.begin() + static_cast<std::ptrdiff_t>(r * cols),
                                   w.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols));
      ASSERT_EQ(out[r], oracle::chunked_sum(row, x, chunks));
    }
  }
}

TEST(ChunksForBatch, ScheduleAndFallback) {
  EXPECT_EQ(chunks_for_batch(NumericsProfile::reference(), 16), 1);
  const auto prof = NumericsProfile::reduction_order({{1, 1}, {8, 8}});
  EXPECT_EQ(chunks_for_batch(prof, 8), 8);
  EXPECT_EQ(chunks_for_batch(prof, 16), 8);
  EXPECT_EQ(chunks_for_batch(prof, 3), 3);
  EXPECT_EQ(chunks_for_batch(NumericsProfile::injected_noise(0.01, 1), 16), 1);
}

TEST(NumericsProfile, RejectsBadSchedules) {
  EXPECT_THROW(NumericsProfile::reduction_order({{4, 0}}).validate(), InvalidArgument);
  EXPECT_THROW(NumericsProfile::injected_noise(-1.0, 0).validate(), InvalidArgument);
  EXPECT_EQ(parse_numerics_mode("reduction-order"), NumericsMode::reduction_order);
  EXPECT_EQ(to_string(NumericsMode::injected_noise), "injected-noise");
  EXPECT_THROW(parse_numerics_mode("fast"), InvalidArgument);
}

TEST(InjectUlpNoise, SoloAndZeroAmplitudeAreIdentity) {
  const std::vector<float> logits{1.0f, -2.5f, 3.25f, 0.0f};
  const auto noisy = NumericsProfile::injected_noise(0x1.0p-7, 99);
  EXPECT_EQ(inject_ulp_noise(logits, noisy, 3, 0, 1), logits);
  EXPECT_EQ(inject_ulp_noise(logits, NumericsProfile::injected_noise(0.0, 99), 3, 0, 8), logits);
}

TEST(InjectUlpNoise, DeterministicAndBounded) {
  std::vector<float> logits(512);
  std::mt19937_64 rng(1);
  std::normal_distribution<float> dist(0.0f, 3.0f);
  for (auto& l : logits) l = dist(rng);
  const auto prof = NumericsProfile::injected_noise(0x1.0p-7, 99);
  const auto a = inject_ulp_noise(logits, prof, 5, 2, 8);
  const auto b = inject_ulp_noise(logits, prof, 5, 2, 8);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, inject_ulp_noise(logits, prof, 6, 2, 8));
  EXPECT_NE(a, logits);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    EXPECT_LE(std::fabs(a[i] - logits[i]), 0x1.0p-7 * (1.0 + std::fabs(logits[i])) * (1 + 1e-6));
  }
}

TEST(InjectUlpNoise, OtherModesThrow) {
  const std::vector<float> logits{1.0f, 2.0f};
  EXPECT_THROW(inject_ulp_noise(logits, NumericsProfile::reference(), 0, 0, 2), ModeViolation);
  EXPECT_THROW(inject_ulp_noise(logits, NumericsProfile::reduction_order(), 0, 0, 2), ModeViolation);
}
