#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "margingate/bf16.hpp"
#include "margingate/kvcache.hpp"
#include "margingate/numerics.hpp"

namespace margingate {

struct ModelSpec {
  int layers = 4;
  int heads = 4;
  int d_model = 64;
  int vocab = 512;
  int max_positions = 512;
  int mlp_mult = 4;
  std::uint64_t seed = 42;
  /// Standard deviation of token and position embedding entries.
  double embed_std = 0.25;

  int head_dim() const noexcept { return d_model / heads; }
  int hidden() const noexcept { return d_model * mlp_mult; }
  void validate() const;
};

/// Row-major bf16 matrix plus a transposed fp32 copy for the hot path.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<Bf16> data;
  std::vector<float> wide_t;  // [cols][rows]

  Bf16 at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  std::span<const Bf16> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
  void prepare();
};

struct LayerWeights {
  Matrix wq, wk, wv, wo;
  Matrix w_in;   // [hidden x d_model]
  Matrix w_out;  // [d_model x hidden]
  std::vector<Bf16> attn_norm;
  std::vector<Bf16> mlp_norm;
};

/// The unembedding is tied to token_embedding.
struct Weights {
  ModelSpec spec;
  Matrix token_embedding;     // [vocab x d_model]
  Matrix position_embedding;  // [max_positions x d_model]
  std::vector<LayerWeights> layers;
  std::vector<Bf16> final_norm;
};

/// Deterministic weights: one SplitMix64/Box-Muller stream seeded by
/// spec.seed, drawn in the order token embedding, position embedding, then
/// per layer Wq, Wk, Wv, Wo, W_in, W_out (row-major each). Embeddings use
/// embed_std, linear layers 1/sqrt(d_model); norm gains are 1.
Weights build_model(const ModelSpec& spec);

struct StepOutput {
  std::vector<float> logits;
  ColumnSet columns;
};

struct BatchContext {
  int batch_size = 1;
  int row = 0;
  std::int64_t step = 0;  // decode step, keys injected noise
};

/// Optional instrumentation for tests.
struct ForwardProbe {
  double max_softmax_sum_error = 0.0;
  std::int64_t softmax_rows = 0;
};

/// One pre-norm transformer step for `row`: attends over that row's unmasked
/// cached slots plus the new column. Leaves the cache untouched; appending
/// the returned columns is the caller's decision.
StepOutput forward_step(const Weights& weights, const KVCache& cache, int row, int token,
                        int position, const NumericsProfile& profile, BatchContext batch,
                        ForwardProbe* probe = nullptr);

/// Greedy choice over the full logit vector; ties go to the lowest id.
int argmax(std::span<const float> logits);

}  // namespace margingate
