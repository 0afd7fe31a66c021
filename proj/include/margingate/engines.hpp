#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "margingate/kvcache.hpp"
#include "margingate/model.hpp"
#include "margingate/numerics.hpp"

namespace margingate {

/// Rows are left-padded to one storage length. Content token j of every row
/// sits at position id j regardless of its pad count; pads are masked.
struct BatchLayout {
  std::vector<std::vector<int>> rows;
  int protected_row = 0;
  /// Additional leading pads on every row beyond what the longest prompt needs.
  int extra_left_pad = 0;

  static BatchLayout replicated(std::span<const int> prompt, int batch_size);

  int batch_size() const noexcept { return static_cast<int>(rows.size()); }
  int storage_length() const;
  int pad_count(int row) const;
  void validate(int vocab) const;
};

struct DecodeConfig {
  int max_new_tokens = 128;
  std::optional<int> eos_token;
  bool snapshot_kv = false;
  int top_k = 64;
  /// Keep the full logit vector of every step (calibration needs it).
  bool keep_logits = false;

  void validate() const;
};

enum class StopReason { eos, cap };
std::string_view to_string(StopReason r) noexcept;

namespace step_flags {
inline constexpr std::uint32_t kTriggered = 1u << 0;
inline constexpr std::uint32_t kRepaired = 1u << 1;
inline constexpr std::uint32_t kNoOp = 1u << 2;  // row already finished
}  // namespace step_flags

struct StepRecord {
  int token = 0;
  float margin = 0.0f;
  std::vector<int> topk_ids;
  std::vector<float> topk_values;
  std::uint32_t flags = 0;
};

struct DecodeTrace {
  std::vector<int> prompt;
  std::vector<StepRecord> steps;
  StopReason stop = StopReason::cap;
  /// Final cache columns by content position, when snapshot_kv is set.
  std::vector<ColumnSet> columns;
  /// Full logits per step, when keep_logits is set.
  std::vector<std::vector<float>> logits;

  std::size_t length() const noexcept { return steps.size(); }
  std::vector<int> tokens() const;
};

/// Builds the per-step record (top-k window, margin) from batched logits.
StepRecord make_step_record(std::span<const float> logits, int top_k);

struct EngineOptions {
  /// Rows with identical layout rows share one forward computation while
  /// their state stays identical. Bit-exact. Ignored under injected noise.
  bool share_identical_rows = true;
};

/// Lockstep greedy machinery shared by the batched engine and the policies.
/// Each call to step() runs the forward for every active row and appends the
/// tentative columns; the caller then commits a token per row and may
/// overwrite the protected row's newest column.
class BatchRunner {
 public:
  BatchRunner(const Weights& weights, BatchLayout layout, DecodeConfig cfg,
              NumericsProfile profile, EngineOptions options = {});

  const BatchLayout& layout() const noexcept { return layout_; }
  const DecodeConfig& config() const noexcept { return cfg_; }
  int batch_size() const noexcept { return layout_.batch_size(); }
  std::int64_t step_index() const noexcept { return step_; }
  bool done() const;
  bool finished(int row) const { return finished_[row]; }

  /// Forward + tentative append for all active rows. Entries for finished
  /// rows are empty.
  const std::vector<std::optional<StepOutput>>& step();

  /// Emits `token` for `row` at the current step.
  void commit(int row, int token);

  /// Overwrites the column appended by the current step for `row`.
  void overwrite_current_column(int row, const ColumnSet& columns);

  /// Slot of the column appended by the current step.
  int current_slot(int row) const { return cache_.filled(row) - 1; }

  /// Prompt followed by every committed token of `row`.
  std::vector<int> committed_prefix(int row) const;
  const std::vector<int>& emitted(int row) const { return emitted_[row]; }

  const KVCache& cache() const noexcept { return cache_; }

  /// Content-position column snapshot of a row.
  std::vector<ColumnSet> snapshot(int row) const;

  std::int64_t forward_calls() const noexcept { return forward_calls_; }

 private:
  void prefill();
  void refresh_sharing();
  void detach(int row);
  int input_token(int row) const;
  int input_position(int row) const;

  const Weights* weights_;
  BatchLayout layout_;
  DecodeConfig cfg_;
  NumericsProfile profile_;
  bool share_;
  KVCache cache_;
  std::vector<int> rep_;  // representative row whose forward this row reuses
  std::vector<bool> dirty_;
  std::vector<bool> finished_;
  std::vector<std::vector<int>> emitted_;
  std::vector<std::optional<StepOutput>> outputs_;
  std::int64_t step_ = -1;
  std::int64_t forward_calls_ = 0;
};

/// Greedy solo decode under the reference profile.
DecodeTrace decode_reference(const Weights& weights, std::span<const int> prompt,
                             const DecodeConfig& cfg);

/// Greedy lockstep decode of every row under `profile`; one trace per row.
std::vector<DecodeTrace> decode_batched(const Weights& weights, const BatchLayout& layout,
                                        const DecodeConfig& cfg, const NumericsProfile& profile,
                                        EngineOptions options = {});

struct VerifyResult {
  int token = 0;
  ColumnSet columns;  // column at the final prefix position
  std::vector<float> logits;
};

/// Reference-profile forward over the whole prefix (positions 0..n-1);
/// returns the greedy next token and the column of the last prefix position.
VerifyResult verify_step(const Weights& weights, std::span<const int> committed_prefix);

/// Stateful verifier. full_recompute replays the entire prefix on a fresh
/// cache each call. incremental keeps the reference columns of the longest
/// previously seen prefix and only computes the missing tail. Both give
/// bit-identical results.
class Verifier {
 public:
  enum class Strategy { full_recompute, incremental };

  explicit Verifier(const Weights& weights, Strategy strategy = Strategy::incremental);

  VerifyResult verify(std::span<const int> committed_prefix);

  Strategy strategy() const noexcept { return strategy_; }
  std::int64_t calls() const noexcept { return calls_; }
  /// Cost model: sum of prefix lengths over calls (full recomputation price).
  std::int64_t charged_prefix_tokens() const noexcept { return charged_; }
  std::int64_t forward_calls() const noexcept { return forward_calls_; }

 private:
  const Weights* weights_;
  Strategy strategy_;
  KVCache cache_;
  std::vector<int> tokens_;
  std::int64_t calls_ = 0;
  std::int64_t charged_ = 0;
  std::int64_t forward_calls_ = 0;
};

}  // namespace margingate
