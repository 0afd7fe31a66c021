#pragma once

#include <cstdint>
#include <limits>
#include <string_view>
#include <vector>

#include "margingate/engines.hpp"
#include "margingate/logits.hpp"

namespace margingate {

enum class GateMode { margin_gate, oracle, always_verify, never_verify };

std::string_view to_string(GateMode mode) noexcept;
GateMode parse_gate_mode(std::string_view text);

inline constexpr double kInfiniteTau = std::numeric_limits<double>::infinity();

struct GateConfig {
  double tau = 0.0;  // verify when margin < tau (strict)
  GateMode mode = GateMode::margin_gate;

  void validate() const;
  bool triggers(float margin) const noexcept;
};

enum class CommitKind { fast, verified, repair };
std::string_view to_string(CommitKind kind) noexcept;

struct CommitRecord {
  int step = 0;
  CommitKind kind = CommitKind::fast;
  float margin = 0.0f;
  int tentative = 0;
  int final_token = 0;
  bool synchronous = true;  // committed prefix still equals the reference prefix
};

/// Throws InvariantViolation if the record contradicts its commit kind.
void check_commit_record(const CommitRecord& record, const GateConfig& gate);

struct GateStats {
  std::int64_t steps = 0;
  std::int64_t sync_steps = 0;
  std::int64_t triggered = 0;       // over synchronous steps
  std::int64_t repairs = 0;         // over synchronous steps
  std::int64_t triggered_total = 0; // over all steps
  std::int64_t repairs_total = 0;
  double r_verify = 0.0;
  double r_repair = 0.0;
  bool sequence_deterministic = false;
  std::int64_t verifier_prefix_tokens = 0;       // cost model
  std::int64_t always_verify_prefix_tokens = 0;  // cost of verifying every step
  std::int64_t locality_checks = 0;
};

struct PolicyOptions {
  Verifier::Strategy verifier = Verifier::Strategy::incremental;
  /// Reference trace of the protected prompt; computed when null.
  const DecodeTrace* reference = nullptr;
  /// Digest the cache around every repair and fail on any change outside
  /// the repaired slice.
  bool audit_locality = true;
  EngineOptions engine;
};

struct PolicyRun {
  DecodeTrace trace;  // protected row: emitted tokens, batched top-k/margins
  std::vector<CommitRecord> commits;
  GateStats stats;
  std::vector<DecodeTrace> others;  // by row; the protected entry stays empty
};

/// Shared commit/repair loop for every GateMode.
PolicyRun run_policy(const Weights& weights, const BatchLayout& layout, const DecodeConfig& cfg,
                     const GateConfig& gate, const NumericsProfile& profile, const PolicyOptions& options = {});

/// Requires gate.mode == margin_gate (or the always/never endpoints).
PolicyRun run_margingate(const Weights& weights, const BatchLayout& layout, const DecodeConfig& cfg,
                         const GateConfig& gate, const NumericsProfile& profile,
                         const PolicyOptions& options = {});

struct OracleRun {
  DecodeTrace trace;
  int repairs = 0;
  bool deterministic = false;
  GateStats stats;
};

OracleRun run_oracle_repair(const Weights& weights, const BatchLayout& layout, const DecodeConfig& cfg,
                            const NumericsProfile& profile, const PolicyOptions& options = {});

/// Replays a gate offline over a recorded margin stream: fraction of margins
/// strictly below tau.
double replay_trigger_rate(std::span<const float> margins, double tau);

}  // namespace margingate
