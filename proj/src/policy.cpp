#include "margingate/policy.hpp"

#include <cmath>
#include <string>

#include "margingate/errors.hpp"

namespace margingate {

std::string_view to_string(GateMode mode) noexcept {
  switch (mode) {
    case GateMode::margin_gate: return "margin-gate";
    case GateMode::oracle: return "oracle";
    case GateMode::always_verify: return "always-verify";
    case GateMode::never_verify: return "never-verify";
  }
  return "?";
}

GateMode parse_gate_mode(std::string_view text) {
  if (text == "margin-gate") return GateMode::margin_gate;
  if (text == "oracle") return GateMode::oracle;
  if (text == "always-verify") return GateMode::always_verify;
  if (text == "never-verify") return GateMode::never_verify;
  throw InvalidArgument("unknown gate mode '" + std::string(text) + "'");
}

std::string_view to_string(CommitKind kind) noexcept {
  switch (kind) {
    case CommitKind::fast: return "fast";
    case CommitKind::verified: return "verified";
    case CommitKind::repair: return "repair";
  }
  return "?";
}

void GateConfig::validate() const {
  if (std::isnan(tau) || tau < 0.0) throw InvalidArgument("GateConfig: tau must be >= 0");
}

bool GateConfig::triggers(float margin) const noexcept {
  switch (mode) {
    case GateMode::always_verify: return true;
    case GateMode::never_verify: return false;
    case GateMode::oracle: return true;
    case GateMode::margin_gate: return static_cast<double>(margin) < tau;
  }
  return false;
}

void check_commit_record(const CommitRecord& rec, const GateConfig& gate) {
  auto fail = [&](const char* what) {
    throw InvariantViolation("commit record at step " + std::to_string(rec.step) + " (" +
                             std::string(to_string(rec.kind)) + "): " + what);
  };
  const bool below = gate.mode == GateMode::oracle ? true : gate.triggers(rec.margin);
  switch (rec.kind) {
    case CommitKind::fast:
      if (gate.mode != GateMode::oracle && below) fail("fast commit on a triggering margin");
      if (rec.final_token != rec.tentative) fail("fast commit changed the token");
      break;
    case CommitKind::verified:
      if (!below) fail("verified commit without a trigger");
      if (rec.final_token != rec.tentative) fail("verified commit changed the token");
      break;
    case CommitKind::repair:
      if (!below) fail("repair without a trigger");
      if (rec.final_token == rec.tentative) fail("repair kept the tentative token");
      break;
  }
}

PolicyRun run_policy(const Weights& weights, const BatchLayout& layout, const DecodeConfig& cfg,
                     const GateConfig& gate, const NumericsProfile& profile, const PolicyOptions& options) {
  gate.validate();
  layout.validate(weights.spec.vocab);
  const int prot = layout.protected_row;
  const auto& prompt = layout.rows[static_cast<std::size_t>(prot)];

  DecodeTrace owned_reference;
  const DecodeTrace* reference = options.reference;
  if (reference == nullptr) {
    DecodeConfig ref_cfg = cfg;
    ref_cfg.snapshot_kv = false;
    ref_cfg.keep_logits = false;
    owned_reference = decode_reference(weights, prompt, ref_cfg);
    reference = &owned_reference;
  } else if (reference->prompt != prompt) {
    throw InvalidArgument("run_policy: reference trace belongs to a different prompt");
  }

  BatchRunner runner(weights, layout, cfg, profile, options.engine);
  Verifier verifier(weights, options.verifier);
  const int n = runner.batch_size();

  PolicyRun run;
  run.trace.prompt = prompt;
  run.others.resize(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) run.others[r].prompt = layout.rows[r];
  GateStats& st = run.stats;
  bool synchronous = true;

  while (!runner.done()) {
    const auto& outs = runner.step();
    for (int r = 0; r < n; ++r) {
      if (r == prot || !outs[r]) continue;
      StepRecord rec = make_step_record(outs[r]->logits, cfg.top_k);
      runner.commit(r, rec.token);
      run.others[r].steps.push_back(std::move(rec));
    }
    if (!outs[prot]) continue;

    const auto t = static_cast<int>(runner.emitted(prot).size());
    StepRecord rec = make_step_record(outs[prot]->logits, cfg.top_k);
    CommitRecord commit;
    commit.step = t;
    commit.margin = rec.margin;
    commit.tentative = rec.token;
    commit.final_token = rec.token;
    commit.synchronous = synchronous && static_cast<std::size_t>(t) < reference->length();

    const bool triggered = gate.triggers(rec.margin);
    bool repaired = false;
    if (triggered) {
      const std::int64_t charged_before = verifier.charged_prefix_tokens();
      const VerifyResult v = verifier.verify(runner.committed_prefix(prot));
      if (gate.mode != GateMode::oracle) {
        st.verifier_prefix_tokens += verifier.charged_prefix_tokens() - charged_before;
      }
      if (v.token == rec.token) {
        commit.kind = gate.mode == GateMode::oracle ? CommitKind::fast : CommitKind::verified;
      } else {
        commit.kind = CommitKind::repair;
        commit.final_token = v.token;
        repaired = true;
        const int slot = runner.current_slot(prot);
        std::uint64_t before = 0;
        if (options.audit_locality) before = runner.cache().digest(std::pair{prot, slot});
        runner.overwrite_current_column(prot, v.columns);
        if (options.audit_locality) {
          ++st.locality_checks;
          if (runner.cache().digest(std::pair{prot, slot}) != before) {
            throw InvariantViolation("repair modified cache entries outside the repaired column");
          }
        }
      }
    }
    check_commit_record(commit, gate);

    const bool counted_trigger = triggered && gate.mode != GateMode::oracle;
    ++st.steps;
    st.always_verify_prefix_tokens += static_cast<std::int64_t>(prompt.size()) + t;
    if (counted_trigger) ++st.triggered_total;
    if (repaired) ++st.repairs_total;
    if (commit.synchronous) {
      ++st.sync_steps;
      if (counted_trigger) ++st.triggered;
      if (repaired) ++st.repairs;
    }

    rec.token = commit.final_token;
    if (counted_trigger) rec.flags |= step_flags::kTriggered;
    if (repaired) rec.flags |= step_flags::kRepaired;
    runner.commit(prot, commit.final_token);
    if (cfg.keep_logits) run.trace.logits.push_back(outs[prot]->logits);
    run.trace.steps.push_back(std::move(rec));
    run.commits.push_back(commit);

    if (synchronous && (static_cast<std::size_t>(t) >= reference->length() ||
                        reference->steps[static_cast<std::size_t>(t)].token != commit.final_token)) {
      synchronous = false;
    }
  }

  for (int r = 0; r < n; ++r) {
    DecodeTrace& tr = r == prot ? run.trace : run.others[r];
    tr.stop = (cfg.eos_token && !tr.steps.empty() && tr.steps.back().token == *cfg.eos_token)
                  ? StopReason::eos
                  : StopReason::cap;
  }
  if (cfg.snapshot_kv) run.trace.columns = runner.snapshot(prot);

  st.sequence_deterministic = run.trace.tokens() == reference->tokens();
  if (st.sync_steps > 0) {
    st.r_verify = static_cast<double>(st.triggered) / static_cast<double>(st.sync_steps);
    st.r_repair = static_cast<double>(st.repairs) / static_cast<double>(st.sync_steps);
  }
  if (gate.mode == GateMode::oracle) {
    st.r_verify = 0.0;
  }
  return run;
}

PolicyRun run_margingate(const Weights& weights, const BatchLayout& layout, const DecodeConfig& cfg,
                         const GateConfig& gate, const NumericsProfile& profile, const PolicyOptions& options) {
  if (gate.mode == GateMode::oracle) {
    throw InvalidArgument("run_margingate: use run_oracle_repair for oracle mode");
  }
  return run_policy(weights, layout, cfg, gate, profile, options);
}

OracleRun run_oracle_repair(const Weights& weights, const BatchLayout& layout, const DecodeConfig& cfg,
                            const NumericsProfile& profile, const PolicyOptions& options) {
  GateConfig gate;
  gate.mode = GateMode::oracle;
  PolicyRun run = run_policy(weights, layout, cfg, gate, profile, options);
  OracleRun out;
  out.repairs = static_cast<int>(run.stats.repairs_total);
  out.deterministic = run.stats.sequence_deterministic;
  out.stats = run.stats;
  out.trace = std::move(run.trace);
  return out;
}

double replay_trigger_rate(std::span<const float> margins, double tau) {
  if (margins.empty()) throw UndefinedMetric("replay_trigger_rate: empty margin stream");
  std::int64_t hits = 0;
  for (float m : margins) hits += static_cast<double>(m) < tau ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(margins.size());
}

}  // namespace margingate
