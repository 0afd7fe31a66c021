#include "margingate/numerics.hpp"

#include <algorithm>
#include <cmath>

#include "margingate/errors.hpp"
#include "margingate/rng.hpp"

namespace margingate {

std::string_view to_string(NumericsMode mode) noexcept {
  switch (mode) {
    case NumericsMode::reduction_order: return "reduction-order";
    case NumericsMode::injected_noise: return "injected-noise";
    case NumericsMode::reference: return "reference";
  }
  return "?";
}

NumericsMode parse_numerics_mode(std::string_view text) {
  if (text == "reduction-order") return NumericsMode::reduction_order;
  if (text == "injected-noise") return NumericsMode::injected_noise;
  if (text == "reference") return NumericsMode::reference;
  throw InvalidArgument("unknown numerics mode '" + std::string(text) + "'");
}

NumericsProfile NumericsProfile::reduction_order(std::map<int, int> schedule) {
  NumericsProfile p;
  p.mode = NumericsMode::reduction_order;
  p.chunk_schedule = std::move(schedule);
  return p;
}

NumericsProfile NumericsProfile::injected_noise(double amplitude, std::uint64_t seed) {
  NumericsProfile p;
  p.mode = NumericsMode::injected_noise;
  p.noise_amplitude = amplitude;
  p.noise_seed = seed;
  return p;
}

void NumericsProfile::validate() const {
  for (const auto& [batch, chunks] : chunk_schedule) {
    if (batch < 1) throw InvalidArgument("chunk_schedule batch size must be >= 1");
    if (chunks < 1) throw InvalidArgument("chunk_schedule chunk count must be >= 1");
  }
  if (!(noise_amplitude >= 0.0) || !std::isfinite(noise_amplitude)) {
    throw InvalidArgument("noise_amplitude must be finite and >= 0");
  }
}

ReductionPlan::ReductionPlan(std::size_t length, int chunks) : length_(length) {
  if (chunks < 1) throw InvalidArgument("chunk count must be >= 1");
  const std::size_t cap = std::max<std::size_t>(length, 1);
  chunks_ = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(chunks), cap));
  base_ = length_ / static_cast<std::size_t>(chunks_);
  rem_ = length_ % static_cast<std::size_t>(chunks_);
}

std::size_t ReductionPlan::chunk_begin(int i) const noexcept {
  const auto idx = static_cast<std::size_t>(i);
  return idx * base_ + std::min(idx, rem_);
}

namespace {

template <typename T>
float widen(T v) noexcept {
  if constexpr (std::is_same_v<T, Bf16>) {
    return v.to_float();
  } else {
    return v;
  }
}

template <typename T>
float chunked_dot_impl(std::span<const T> a, std::span<const T> b, const ReductionPlan& plan) {
  if (a.size() != b.size() || a.size() != plan.length()) {
    throw InvalidArgument("chunked_dot: operand lengths " + std::to_string(a.size()) + "/" +
                          std::to_string(b.size()) + " do not match plan length " +
                          std::to_string(plan.length()));
  }
  float total = 0.0f;
  for (int c = 0; c < plan.chunk_count(); ++c) {
    float partial = 0.0f;
    for (std::size_t i = plan.chunk_begin(c); i < plan.chunk_end(c); ++i) {
      partial += widen(a[i]) * widen(b[i]);
    }
    total = (c == 0) ? partial : total + partial;
  }
  return total;
}

}  // namespace

float chunked_dot(std::span<const Bf16> a, std::span<const Bf16> b, const ReductionPlan& plan) {
  return chunked_dot_impl(a, b, plan);
}

float chunked_dot(std::span<const float> a, std::span<const float> b, const ReductionPlan& plan) {
  return chunked_dot_impl(a, b, plan);
}

void chunked_matvec_t(std::span<const float> w_t, std::size_t rows, std::span<const float> x,
                      int chunks, std::span<float> out) {
  const std::size_t cols = x.size();
  if (w_t.size() != rows * cols || out.size() != rows) {
    throw InvalidArgument("chunked_matvec_t: shape mismatch");
  }
  const ReductionPlan plan(cols, chunks);
  thread_local std::vector<float> partial;
  partial.resize(rows);
  float* acc = partial.data();
  float* dst = out.data();
  const float* w = w_t.data();
  for (int c = 0; c < plan.chunk_count(); ++c) {
    std::fill_n(acc, rows, 0.0f);
    for (std::size_t k = plan.chunk_begin(c); k < plan.chunk_end(c); ++k) {
      const float xk = x[k];
      const float* wk = w + k * rows;
      for (std::size_t r = 0; r < rows; ++r) acc[r] += wk[r] * xk;
    }
    if (c == 0) {
      std::copy_n(acc, rows, dst);
    } else {
      for (std::size_t r = 0; r < rows; ++r) dst[r] += acc[r];
    }
  }
  if (cols == 0) std::fill_n(dst, rows, 0.0f);
}

int chunks_for_batch(const NumericsProfile& profile, int batch_size) {
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  if (profile.mode != NumericsMode::reduction_order) return 1;
  if (auto it = profile.chunk_schedule.find(batch_size); it != profile.chunk_schedule.end()) {
    return it->second;
  }
  return std::min(batch_size, kDefaultMaxChunks);
}

std::vector<float> inject_ulp_noise(std::span<const float> logits, const NumericsProfile& profile,
                                    std::int64_t step, int row, int batch_size) {
  if (profile.mode != NumericsMode::injected_noise) {
    throw ModeViolation("inject_ulp_noise requires numerics mode injected-noise, got " +
                        std::string(to_string(profile.mode)));
  }
  std::vector<float> out(logits.begin(), logits.end());
  if (batch_size == 1 || profile.noise_amplitude == 0.0) return out;

  std::uint64_t key = hash_combine(profile.noise_seed, static_cast<std::uint64_t>(step));
  key = hash_combine(key, static_cast<std::uint64_t>(row));
  key = hash_combine(key, static_cast<std::uint64_t>(batch_size));
  for (std::size_t j = 0; j < out.size(); ++j) {
    const std::uint64_t h = hash_combine(key, j);
    const double u = static_cast<double>(h >> 11) * 0x1.0p-52 - 1.0;  // [-1, 1)
    const double scale = profile.noise_amplitude * (1.0 + std::fabs(static_cast<double>(out[j])));
    const auto delta = static_cast<float>(u * scale);
    if (delta != 0.0f) out[j] += delta;
  }
  return out;
}

}  // namespace margingate
