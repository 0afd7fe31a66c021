#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "margingate/corpus.hpp"
#include "margingate/policy.hpp"

namespace margingate {

enum class TopkSource { reference, batched };
std::string_view to_string(TopkSource source) noexcept;
TopkSource parse_topk_source(std::string_view text);

struct EpsSummary {
  std::int64_t samples = 0;
  double median = 0.0;
  double max = 0.0;
  double pert_tau = 0.0;  // exactly 2 * max
};

/// Throws UndefinedMetric on an empty sample set.
EpsSummary summarize_eps(std::span<const double> eps);

/// Max-abs logit difference restricted to the top-k indices of the chosen
/// run, at every synchronous step (up to and including the first divergence).
/// Both traces must carry full logits.
std::vector<double> step_eps(const DecodeTrace& batched, const DecodeTrace& reference, int top_k = 50,
                             TopkSource source = TopkSource::reference);

struct CalibrationRow {
  std::string label;  // "bs=N" or "all"
  EpsSummary eps;
};

struct CalibrationReport {
  std::vector<CalibrationRow> rows;  // one per batch size, then "all"
  const CalibrationRow& overall() const { return rows.back(); }
};

struct CalibrationOptions {
  int top_k = 50;
  TopkSource source = TopkSource::reference;
  int workers = 1;
  EngineOptions engine;
};

/// `references` holds one reference trace per corpus prompt, with logits.
CalibrationReport measure_eps(const Weights& weights, const Corpus& corpus, std::span<const int> batch_sizes,
                              LayoutKind layout, int protected_row, const DecodeConfig& cfg,
                              const NumericsProfile& profile, std::span<const DecodeTrace> references,
                              const CalibrationOptions& options = {});

/// Gate outcome aggregated over a trial set.
struct GateAggregate {
  double tau = 0.0;
  int trials = 0;
  int deterministic_trials = 0;
  std::int64_t steps = 0;
  std::int64_t sync_steps = 0;
  std::int64_t triggered = 0;
  std::int64_t repairs = 0;
  std::int64_t verifier_prefix_tokens = 0;
  std::int64_t always_verify_prefix_tokens = 0;

  double trigger_rate() const;      // triggered / sync_steps
  double repair_rate() const;       // repairs / sync_steps
  double determinism_rate() const;  // deterministic_trials / trials
  double relative_cost() const;     // verifier tokens / always-verify tokens
};

struct GateRunOptions {
  int workers = 1;
  Verifier::Strategy verifier = Verifier::Strategy::incremental;
  bool audit_locality = true;
  EngineOptions engine;
};

/// Runs the gate on every trial against the per-prompt references.
GateAggregate evaluate_gate(const Weights& weights, std::span<const Trial> trials,
                            std::span<const DecodeTrace> references, const DecodeConfig& cfg, double tau,
                            const NumericsProfile& profile, const GateRunOptions& options = {});

struct SweepResult {
  std::vector<GateAggregate> rows;  // ascending tau
  std::optional<double> tau100;
  bool no_deterministic_point = false;
};

/// Smallest tau whose determinism rate is exactly 1. Rows must be ascending.
std::optional<double> select_tau100(std::span<const GateAggregate> rows);

struct SweepPlan {
  std::vector<double> base;   // ascending, finite, > 0
  double cover = 0.0;         // keep doubling the grid until it reaches this (pert_tau)
  double max_tau = 0.0;       // extension cap; past it the infinite endpoint is run
  bool append_infinity = true;
};

/// Base grid, extended by doubling until it covers `cover`.
std::vector<double> sweep_grid(const SweepPlan& plan);

/// Runs the grid; if no point is deterministic, keeps doubling past the
/// last point until one is or max_tau is exceeded, then (optionally) runs the
/// always-verify endpoint.
SweepResult sweep_tau(const Weights& weights, std::span<const Trial> trials,
                      std::span<const DecodeTrace> references, const DecodeConfig& cfg, const SweepPlan& plan,
                      const NumericsProfile& profile, const GateRunOptions& options = {});

struct TransferCorpus {
  std::string name;
  std::vector<Trial> trials;
  std::vector<DecodeTrace> references;
};

struct TransferRow {
  std::string corpus;
  GateAggregate result;
};

std::vector<TransferRow> transfer_check(const Weights& weights, double tau, std::span<const TransferCorpus> corpora,
                                        const DecodeConfig& cfg, const NumericsProfile& profile,
                                        const GateRunOptions& options = {});

}  // namespace margingate
