#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "margingate/bf16.hpp"

namespace margingate {

enum class NumericsMode {
  reduction_order,  // chunk count follows the batch size
  injected_noise,   // C = 1 everywhere, seeded perturbation on final logits
  reference,        // C = 1 everywhere, no noise: the batch-invariant path
};

std::string_view to_string(NumericsMode mode) noexcept;
NumericsMode parse_numerics_mode(std::string_view text);

inline constexpr int kDefaultMaxChunks = 8;
inline constexpr double kDefaultNoiseAmplitude = 0x1.0p-7;

struct NumericsProfile {
  NumericsMode mode = NumericsMode::reference;
  /// batch size -> chunk count. Missing keys fall back to min(batch, 8).
  std::map<int, int> chunk_schedule;
  /// Relative amplitude: a logit l moves by at most amplitude * (1 + |l|).
  double noise_amplitude = kDefaultNoiseAmplitude;
  std::uint64_t noise_seed = 0;

  static NumericsProfile reference() { return {}; }
  static NumericsProfile reduction_order(std::map<int, int> schedule = {});
  static NumericsProfile injected_noise(double amplitude, std::uint64_t seed);

  void validate() const;
};

/// Contiguous partition of [0, length) into `chunks` pieces. Sizes differ by
/// at most one; the leading pieces take the remainder. The chunk count is
/// clamped to [1, max(length, 1)]; no piece is empty.
class ReductionPlan {
 public:
  ReductionPlan(std::size_t length, int chunks);

  std::size_t length() const noexcept { return length_; }
  int chunk_count() const noexcept { return chunks_; }
  std::size_t chunk_begin(int i) const noexcept;
  std::size_t chunk_end(int i) const noexcept { return chunk_begin(i + 1); }

 private:
  std::size_t length_;
  int chunks_;
  std::size_t base_;
  std::size_t rem_;
};

/// Products in fp32 (exact for bf16 operands), sequential fp32 accumulation
/// inside each chunk, chunk partials combined left to right.
float chunked_dot(std::span<const Bf16> a, std::span<const Bf16> b, const ReductionPlan& plan);

/// Same reduction on bf16-valued floats. This is the hot-path form used by the
/// model; inputs must already be bf16-representable.
float chunked_dot(std::span<const float> a, std::span<const float> b, const ReductionPlan& plan);

/// out[r] = chunked_dot(row r of W, x) for every r, with W stored transposed
/// (w_t[k * rows + r]). Bit-identical to the per-row form; laid out so the
/// row loop vectorises without reassociating any sum.
void chunked_matvec_t(std::span<const float> w_t, std::size_t rows, std::span<const float> x,
                      int chunks, std::span<float> out);

int chunks_for_batch(const NumericsProfile& profile, int batch_size);

/// Deterministic stand-in for batch-shape perturbation of the final logits.
/// Requires mode == injected_noise; batch_size == 1 is the unperturbed solo run.
std::vector<float> inject_ulp_noise(std::span<const float> logits, const NumericsProfile& profile,
                                    std::int64_t step, int row, int batch_size);

}  // namespace margingate
