#include "margingate/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "margingate/diagnostics.hpp"
#include "margingate/errors.hpp"
#include "margingate/logits.hpp"
#include "margingate/parallel.hpp"

namespace margingate {

std::string_view to_string(TopkSource source) noexcept {
  return source == TopkSource::reference ? "reference" : "batched";
}

TopkSource parse_topk_source(std::string_view text) {
  if (text == "reference") return TopkSource::reference;
  if (text == "batched") return TopkSource::batched;
  throw InvalidArgument("unknown top-k source '" + std::string(text) + "'");
}

EpsSummary summarize_eps(std::span<const double> eps) {
  if (eps.empty()) throw UndefinedMetric("summarize_eps: no synchronous steps");
  EpsSummary s;
  s.samples = static_cast<std::int64_t>(eps.size());
  s.median = median(std::vector<double>(eps.begin(), eps.end()));
  s.max = *std::max_element(eps.begin(), eps.end());
  s.pert_tau = 2.0 * s.max;
  return s;
}

std::vector<double> step_eps(const DecodeTrace& batched, const DecodeTrace& reference, int top_k,
                             TopkSource source) {
  const auto p_div = find_first_divergence(batched, reference);
  std::size_t last = std::min(batched.length(), reference.length());
  if (p_div) last = std::min(last, static_cast<std::size_t>(*p_div) + 1);
  if (batched.logits.size() < last || reference.logits.size() < last) {
    throw InvalidArgument("step_eps: traces were decoded without keep_logits");
  }
  std::vector<double> out;
  out.reserve(last);
  for (std::size_t t = 0; t < last; ++t) {
    const auto& b = batched.logits[t];
    const auto& r = reference.logits[t];
    if (b.size() != r.size()) throw InvalidArgument("step_eps: logit width mismatch");
    const auto& basis = source == TopkSource::reference ? r : b;
    const TopK window = margingate::top_k(basis, top_k);
    double eps = 0.0;
    for (int id : window.ids) {
      eps = std::max(eps, std::fabs(static_cast<double>(b[id]) - static_cast<double>(r[id])));
    }
    out.push_back(eps);
  }
  return out;
}

CalibrationReport measure_eps(const Weights& weights, const Corpus& corpus, std::span<const int> batch_sizes,
                              LayoutKind layout, int protected_row, const DecodeConfig& cfg,
                              const NumericsProfile& profile, std::span<const DecodeTrace> references,
                              const CalibrationOptions& options) {
  if (corpus.empty()) throw InvalidArgument("measure_eps: empty corpus");
  if (references.size() != corpus.size()) throw InvalidArgument("measure_eps: one reference per prompt required");
  DecodeConfig run_cfg = cfg;
  run_cfg.keep_logits = true;
  run_cfg.snapshot_kv = false;
  const auto trials = make_trials(corpus, batch_sizes, layout, protected_row);
  auto per_trial = parallel_map(trials.size(), options.workers, [&](std::size_t i) {
    const Trial& t = trials[i];
    auto traces = decode_batched(weights, t.layout, run_cfg, profile, options.engine);
    return step_eps(traces[static_cast<std::size_t>(t.layout.protected_row)], references[t.prompt], options.top_k,
                    options.source);
  });

  std::map<int, std::vector<double>> by_bs;
  std::vector<double> all;
  for (std::size_t i = 0; i < trials.size(); ++i) {
    auto& bucket = by_bs[trials[i].batch_size];
    bucket.insert(bucket.end(), per_trial[i].begin(), per_trial[i].end());
    all.insert(all.end(), per_trial[i].begin(), per_trial[i].end());
  }
  CalibrationReport report;
  for (const auto& [bs, eps] : by_bs) {
    report.rows.push_back({"bs=" + std::to_string(bs), summarize_eps(eps)});
  }
  report.rows.push_back({"all", summarize_eps(all)});
  return report;
}

namespace {

double ratio(std::int64_t num, std::int64_t den) {
  return den > 0 ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
}

}  // namespace

double GateAggregate::trigger_rate() const { return ratio(triggered, sync_steps); }
double GateAggregate::repair_rate() const { return ratio(repairs, sync_steps); }
double GateAggregate::determinism_rate() const { return ratio(deterministic_trials, trials); }
double GateAggregate::relative_cost() const {
  return ratio(verifier_prefix_tokens, always_verify_prefix_tokens);
}

GateAggregate evaluate_gate(const Weights& weights, std::span<const Trial> trials,
                            std::span<const DecodeTrace> references, const DecodeConfig& cfg, double tau,
                            const NumericsProfile& profile, const GateRunOptions& options) {
  GateConfig gate;
  gate.tau = tau;
  gate.mode = std::isinf(tau) ? GateMode::always_verify : GateMode::margin_gate;
  DecodeConfig run_cfg = cfg;
  run_cfg.keep_logits = false;
  run_cfg.snapshot_kv = false;
  auto stats = parallel_map(trials.size(), options.workers, [&](std::size_t i) {
    const Trial& t = trials[i];
    PolicyOptions po;
    po.verifier = options.verifier;
    po.reference = &references[static_cast<std::size_t>(t.prompt)];
    po.audit_locality = options.audit_locality;
    po.engine = options.engine;
    return run_margingate(weights, t.layout, run_cfg, gate, profile, po).stats;
  });
  GateAggregate agg;
  agg.tau = tau;
  for (const GateStats& s : stats) {
    ++agg.trials;
    agg.deterministic_trials += s.sequence_deterministic ? 1 : 0;
    agg.steps += s.steps;
    agg.sync_steps += s.sync_steps;
    agg.triggered += s.triggered;
    agg.repairs += s.repairs;
    agg.verifier_prefix_tokens += s.verifier_prefix_tokens;
    agg.always_verify_prefix_tokens += s.always_verify_prefix_tokens;
  }
  return agg;
}

std::optional<double> select_tau100(std::span<const GateAggregate> rows) {
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (!(rows[i - 1].tau < rows[i].tau)) throw InvalidArgument("select_tau100: grid must be strictly ascending");
  }
  for (const auto& row : rows) {
    if (row.trials > 0 && row.deterministic_trials == row.trials) return row.tau;
  }
  return std::nullopt;
}

std::vector<double> sweep_grid(const SweepPlan& plan) {
  if (plan.base.empty()) throw InvalidArgument("sweep grid is empty");
  for (std::size_t i = 0; i < plan.base.size(); ++i) {
    if (!(plan.base[i] > 0.0) || !std::isfinite(plan.base[i])) {
      throw InvalidArgument("sweep grid values must be finite and > 0");
    }
    if (i > 0 && !(plan.base[i - 1] < plan.base[i])) throw InvalidArgument("sweep grid must be ascending");
  }
  std::vector<double> grid = plan.base;
  while (grid.back() < plan.cover) grid.push_back(grid.back() * 2.0);
  return grid;
}

SweepResult sweep_tau(const Weights& weights, std::span<const Trial> trials,
                      std::span<const DecodeTrace> references, const DecodeConfig& cfg, const SweepPlan& plan,
                      const NumericsProfile& profile, const GateRunOptions& options) {
  SweepResult result;
  for (double tau : sweep_grid(plan)) {
    result.rows.push_back(evaluate_gate(weights, trials, references, cfg, tau, profile, options));
  }
  auto deterministic = [&] { return select_tau100(result.rows).has_value(); };
  while (!deterministic() && result.rows.back().tau * 2.0 <= plan.max_tau) {
    result.rows.push_back(
        evaluate_gate(weights, trials, references, cfg, result.rows.back().tau * 2.0, profile, options));
  }
  if (!deterministic() && plan.append_infinity) {
    result.rows.push_back(evaluate_gate(weights, trials, references, cfg, kInfiniteTau, profile, options));
  }
  result.tau100 = select_tau100(result.rows);
  result.no_deterministic_point = !result.tau100.has_value();
  return result;
}

std::vector<TransferRow> transfer_check(const Weights& weights, double tau, std::span<const TransferCorpus> corpora,
                                        const DecodeConfig& cfg, const NumericsProfile& profile,
                                        const GateRunOptions& options) {
  std::vector<TransferRow> rows;
  for (const auto& c : corpora) {
    rows.push_back({c.name, evaluate_gate(weights, c.trials, c.references, cfg, tau, profile, options)});
  }
  return rows;
}

}  // namespace margingate
