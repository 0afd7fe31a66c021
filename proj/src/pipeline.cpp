#include "margingate/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "margingate/diagnostics.hpp"
#include "margingate/errors.hpp"
#include "margingate/hash.hpp"
#include "margingate/parallel.hpp"
#include "margingate/policy.hpp"

#ifndef MARGINGATE_VERSION
#define MARGINGATE_VERSION "0.0.0"
#endif

namespace margingate {

using nlohmann::json;

std::string tool_version() { return MARGINGATE_VERSION; }

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string num(double v) { return format_double(v); }
std::string num(std::int64_t v) { return std::to_string(v); }
std::string num(int v) { return std::to_string(v); }

std::string trace_csv(const DecodeTrace& t) {
  std::string out = "step,token,margin,flags,topk_ids,topk_values\n";
  for (std::size_t i = 0; i < t.steps.size(); ++i) {
    const auto& s = t.steps[i];
    out += std::to_string(i) + ',' + std::to_string(s.token) + ',' + format_double(s.margin) + ',' +
           std::to_string(s.flags) + ',';
    for (std::size_t j = 0; j < s.topk_ids.size(); ++j) out += (j ? " " : "") + std::to_string(s.topk_ids[j]);
    out += ',';
    for (std::size_t j = 0; j < s.topk_values.size(); ++j) {
      out += (j ? " " : "") + format_double(s.topk_values[j]);
    }
    out += '\n';
  }
  return out;
}

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

/// Builds CSV text with a header line; rows are joined with commas.
class Csv {
 public:
  explicit Csv(std::initializer_list<std::string_view> header) {
    bool first = true;
    for (auto h : header) {
      if (!first) text_ += ',';
      text_ += h;
      first = false;
    }
    text_ += '\n';
  }
  void row(std::initializer_list<std::string> cells) {
    bool first = true;
    for (const auto& c : cells) {
      if (!first) text_ += ',';
      text_ += c;
      first = false;
    }
    text_ += '\n';
  }
  const std::string& text() const { return text_; }

 private:
  std::string text_;
};

double safe_ratio(std::int64_t a, std::int64_t b) {
  return b > 0 ? static_cast<double>(a) / static_cast<double>(b) : 0.0;
}

DecodeTrace without_columns(DecodeTrace t) {
  t.columns.clear();
  t.columns.shrink_to_fit();
  t.logits.clear();
  t.logits.shrink_to_fit();
  return t;
}

Corpus load_or_generate(const RunConfig& config) {
  Corpus corpus;
  if (config.corpus_file) {
    try {
      corpus = read_corpus(std::filesystem::path(*config.corpus_file));
    } catch (const InvalidArgument& e) {
      throw EmptyInput(std::string("corpus: ") + e.what());
    } catch (const std::runtime_error& e) {
      throw EmptyInput(std::string("corpus: ") + e.what());
    }
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      if (corpus.prompts[i].empty()) throw EmptyInput("corpus prompt " + std::to_string(i) + " is empty");
      for (int tok : corpus.prompts[i]) {
        if (tok < 0 || tok >= config.model.vocab) {
          throw EmptyInput("corpus prompt " + std::to_string(i) + " has token " + std::to_string(tok) +
                           " outside the vocabulary");
        }
      }
    }
  } else {
    corpus = generate_corpus(config.corpus, config.model.vocab);
  }
  return corpus;
}

void require_corpus(const Corpus& corpus) {
  if (corpus.empty()) throw EmptyInput("corpus is empty; nothing to run");
}

}  // namespace

Pipeline::Pipeline(RunConfig config, std::filesystem::path out)
    : config_(std::move(config)), out_(std::move(out)) {
  config_.validate();
  weights_ = build_model(config_.model);
  corpus_ = load_or_generate(config_);

  std::filesystem::create_directories(out_);
  const auto path = out_ / "manifest.json";
  if (std::filesystem::exists(path)) {
    std::ifstream in(path);
    try {
      json existing = json::parse(in);
      if (existing.value("config_hash", "") == config_.hash()) manifest_ = std::move(existing);
    } catch (const json::exception&) {
    }
  }
  if (manifest_.is_null()) {
    manifest_ = json::object();
    manifest_["commands"] = json::object();
  }
  manifest_["tool"] = "margingate";
  manifest_["version"] = tool_version();
  manifest_["config_hash"] = config_.hash();
  json cfg = json::object();
  std::istringstream text(config_.to_text());
  std::string line;
  while (std::getline(text, line)) {
    const auto eq = line.find(" = ");
    const std::string key = line.substr(0, eq);
    if (key.rfind("run.", 0) == 0) continue;
    cfg[key] = line.substr(eq + 3);
  }
  manifest_["config"] = cfg;
  json transfer_seeds = json::array();
  for (const auto& t : config_.transfer_corpora) transfer_seeds.push_back(t.corpus.seed);
  manifest_["seeds"] = {{"model", config_.model.seed},
                        {"corpus", config_.corpus.seed},
                        {"noise", config_.numerics.noise_seed},
                        {"transfer", transfer_seeds}};
}

std::vector<Trial> Pipeline::trials() const {
  return make_trials(corpus_, config_.batch_sizes, config_.layout, config_.protected_row);
}

EngineOptions Pipeline::engine() const {
  EngineOptions e;
  e.share_identical_rows = config_.share_rows;
  return e;
}

GateRunOptions Pipeline::gate_options() const {
  GateRunOptions o;
  o.workers = config_.workers;
  o.verifier = config_.verifier;
  o.engine = engine();
  return o;
}

const std::vector<DecodeTrace>& Pipeline::references() {
  if (!references_) {
    DecodeConfig cfg = config_.decode;
    cfg.keep_logits = true;
    references_ = reference_traces(weights_, corpus_, cfg, config_.workers);
  }
  return *references_;
}

json Pipeline::begin() const { return json{{"started", utc_now()}, {"outputs", json::array()}}; }

void Pipeline::write_output(json& entry, const std::string& name, const std::string& content) {
  const auto path = out_ / name;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << content;
  f.close();
  if (!f) throw std::runtime_error("failed writing " + path.string());
  Fnv1a64 h;
  h.update(content);
  entry["outputs"].push_back({{"file", name}, {"fnv1a64", hex64(h.value())}, {"bytes", content.size()}});
}

void Pipeline::finish(const std::string& command, json entry) {
  entry["finished"] = utc_now();
  manifest_["commands"][command] = std::move(entry);
  const auto path = out_ / "manifest.json";
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << manifest_.dump(2) << '\n';
}

json Pipeline::gen_corpus() {
  json entry = begin();
  if (corpus_.empty()) std::cerr << "warning: corpus has no prompts\n";
  std::ostringstream text;
  write_corpus(text, corpus_);
  write_output(entry, "corpus.txt", text.str());
  std::int64_t tokens = 0;
  for (const auto& p : corpus_.prompts) tokens += static_cast<std::int64_t>(p.size());
  entry["summary"] = {{"prompts", corpus_.size()}, {"tokens", tokens}};
  json summary = entry["summary"];
  finish("gen-corpus", std::move(entry));
  return summary;
}

json Pipeline::diagnose() {
  require_corpus(corpus_);
  json entry = begin();
  const auto& refs = references();
  const auto ts = trials();
  const bool snapshots = config_.decode.snapshot_kv;
  DecodeConfig cfg = config_.decode;
  cfg.keep_logits = false;

  struct TrialDiag {
    DivergenceReport report;
    DecodeTrace trace;
    std::optional<KvTrialSeries> kv;
  };
  auto diags = parallel_map(ts.size(), config_.workers, [&](std::size_t i) {
    const Trial& t = ts[i];
    const DecodeTrace& ref = refs[static_cast<std::size_t>(t.prompt)];
    auto traces = decode_batched(weights_, t.layout, cfg, config_.numerics, engine());
    DecodeTrace& b = traces[static_cast<std::size_t>(t.layout.protected_row)];
    TrialDiag d;
    d.report = make_divergence_report(b, ref);
    if (snapshots) d.kv = kv_series(b, ref, d.report.p_div);
    d.trace = without_columns(std::move(b));
    return d;
  });

  // Flip rate per batch size.
  Csv flips({"batch_size", "trials", "diverging_trials", "sync_samples", "events", "flip_rate"});
  std::map<int, std::vector<DivergenceReport>> by_bs;
  std::vector<DivergenceReport> all_reports;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    by_bs[ts[i].batch_size].push_back(diags[i].report);
    all_reports.push_back(diags[i].report);
  }
  auto flip_row = [&](const std::string& label, const std::vector<DivergenceReport>& reps) {
    std::int64_t sync = 0;
    int events = 0;
    for (const auto& r : reps) {
      sync += r.sync_samples;
      events += r.events;
    }
    const double rate = flip_rate(reps);
    flips.row({label, num(static_cast<int>(reps.size())), num(events), num(sync), num(events), num(rate)});
    return json{{"trials", reps.size()}, {"sync_samples", sync}, {"events", events}, {"flip_rate", rate}};
  };
  json per_bs = json::object();
  for (const auto& [bs, reps] : by_bs) per_bs[std::to_string(bs)] = flip_row(std::to_string(bs), reps);
  const json overall = flip_row("all", all_reports);
  write_output(entry, "flip_rate.csv", flips.text());

  Csv divergence({"prompt", "batch_size", "p_div", "sync_samples", "batched_token", "reference_token",
                  "batched_margin", "reference_rank"});
  std::vector<GeometryTrial> geo;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto& d = diags[i];
    const DecodeTrace& ref = refs[static_cast<std::size_t>(ts[i].prompt)];
    geo.push_back({&d.trace, &ref, d.report.p_div});
    if (!d.report.p_div) continue;
    const auto p = static_cast<std::size_t>(*d.report.p_div);
    const bool both = p < d.trace.length() && p < ref.length();
    std::optional<int> rank;
    if (both) rank = rank_in_window(d.trace.steps[p], ref.steps[p].token);
    divergence.row({num(ts[i].prompt), num(ts[i].batch_size), num(*d.report.p_div), num(d.report.sync_samples),
                    p < d.trace.length() ? num(d.trace.steps[p].token) : std::string(),
                    p < ref.length() ? num(ref.steps[p].token) : std::string(),
                    p < d.trace.length() ? num(static_cast<double>(d.trace.steps[p].margin)) : std::string(),
                    rank ? num(*rank) : std::string()});
  }
  write_output(entry, "divergence.csv", divergence.text());

  const LogitGeometry g = logit_geometry(geo, config_.geometry_deltas, config_.rank_buckets);
  Csv cluster({"delta", "stable_steps", "divergent_steps", "stable_mean_n", "divergent_mean_n", "ratio"});
  for (std::size_t i = 0; i < g.deltas.size(); ++i) {
    cluster.row({num(g.deltas[i]), num(g.stable_steps), num(g.divergent_steps), num(g.stable_mean[i]),
                 num(g.divergent_mean[i]), opt(g.ratio[i])});
  }
  write_output(entry, "logit_cluster.csv", cluster.text());
  Csv topk({"rank_bucket", "events", "fraction"});
  for (std::size_t b = 0; b < g.rank_buckets.size(); ++b) {
    topk.row({num(g.rank_buckets[b]), num(g.identity_events), num(g.rank_fraction[b])});
  }
  write_output(entry, "logit_topk.csv", topk.text());

  const auto margins = divergence_margins(geo);
  Csv recall({"tau", "events", "recall"});
  json recall_json = json::array();
  for (double tau : config_.recall_taus) {
    std::optional<double> r;
    if (!margins.empty()) r = margin_recall(margins, tau);
    recall.row({num(tau), num(static_cast<int>(margins.size())), opt(r)});
    recall_json.push_back({{"tau", tau}, {"recall", opt_json(r)}});
  }
  write_output(entry, "recall.csv", recall.text());

  json summary = {{"flip_rate", overall["flip_rate"]},
                  {"events", overall["events"]},
                  {"sync_samples", overall["sync_samples"]},
                  {"trials", ts.size()},
                  {"diverging_trials", overall["events"]},
                  {"per_batch_size", per_bs},
                  {"layout", std::string(to_string(config_.layout))},
                  {"recall", recall_json},
                  {"exhausted_windows", g.exhausted_steps}};
  const double rate = overall["flip_rate"].get<double>();
  summary["in_tuned_band"] = rate >= 0.001 && rate <= 0.05 && overall["events"].get<int>() >= 20;

  if (config_.export_traces) {
    for (std::size_t i = 0; i < refs.size(); ++i) {
      write_output(entry, "traces/p" + std::to_string(i) + "_ref.csv", trace_csv(refs[i]));
    }
    for (std::size_t i = 0; i < ts.size(); ++i) {
      write_output(entry, "traces/p" + std::to_string(ts[i].prompt) + "_bs" + std::to_string(ts[i].batch_size) + ".csv",
                   trace_csv(diags[i].trace));
    }
  }

  if (snapshots) {
    Csv per_trial({"prompt", "batch_size", "layer", "position", "delta", "err_k", "err_v"});
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const auto& kv = diags[i].kv;
      if (!kv || kv->zero_position < 0) continue;
      const std::size_t layers = kv->by_position.empty() ? 0 : kv->by_position.front().size();
      for (std::size_t l = 0; l < layers; ++l) {
        for (std::size_t p = 0; p < kv->by_position.size(); ++p) {
          const auto& d = kv->by_position[p][l];
          per_trial.row({num(ts[i].prompt), num(ts[i].batch_size), num(static_cast<int>(l)),
                         num(static_cast<int>(p)), num(static_cast<int>(p) - kv->zero_position),
                         num(static_cast<double>(d.k)), num(static_cast<double>(d.v))});
        }
      }
    }
    write_output(entry, "kv_trials.csv", per_trial.text());

    std::vector<KvTrialSeries> diverging, everything;
    for (auto& d : diags) {
      if (!d.kv) continue;
      if (d.kv->zero_position >= 0) diverging.push_back(*d.kv);
      everything.push_back(std::move(*d.kv));
    }
    Csv aligned({"layer", "delta", "trials", "mean_err_k", "mean_err_v"});
    Csv kv_summary({"layer", "trials", "pre_median_k", "pre_median_v", "at_zero_k", "at_zero_v", "spike_k",
                    "spike_v", "slope_k", "slope_v"});
    if (!diverging.empty()) {
      const auto prof = align_kv_deviation(diverging, config_.kv);
      for (std::size_t l = 0; l < prof.series.size(); ++l) {
        for (const auto& pt : prof.series[l]) {
          aligned.row({num(static_cast<int>(l)), num(pt.delta), num(pt.trials), num(pt.mean_k), num(pt.mean_v)});
        }
        const auto& s = prof.summary[l];
        kv_summary.row({num(static_cast<int>(l)), num(prof.trials), num(s.pre_median_k), num(s.pre_median_v),
                        num(s.at_zero_k), num(s.at_zero_v), opt(s.spike_k), opt(s.spike_v), opt(s.slope_k),
                        opt(s.slope_v)});
      }
      const auto& last = prof.summary.back();
      double max_slope_k = 0.0;
      for (const auto& s : prof.summary) {
        if (s.slope_k) max_slope_k = std::max(max_slope_k, std::fabs(*s.slope_k));
      }
      summary["kv"] = {{"trials", prof.trials},
                       {"last_layer_spike_k", opt_json(last.spike_k)},
                       {"last_layer_spike_v", opt_json(last.spike_v)},
                       {"last_layer_at_zero_k", last.at_zero_k},
                       {"last_layer_at_zero_v", last.at_zero_v},
                       {"last_layer_pre_median_k", last.pre_median_k},
                       {"last_layer_pre_median_v", last.pre_median_v},
                       {"last_layer_slope_k", opt_json(last.slope_k)},
                       {"max_abs_slope_k", max_slope_k}};
    }
    write_output(entry, "kv_aligned.csv", aligned.text());
    write_output(entry, "kv_summary.csv", kv_summary.text());

    const auto lp = layer_profile(everything);
    Csv layers({"layer", "role", "trials", "max_err_k", "max_err_v"});
    double max_dev = 0.0;
    for (const auto& r : lp.rows) {
      std::string role;
      if (r.layer == lp.first) role = "first";
      if (r.layer == lp.mid) role += role.empty() ? "mid" : "+mid";
      if (r.layer == lp.last) role += role.empty() ? "last" : "+last";
      layers.row({num(r.layer), role, num(lp.trials), num(r.max_k), num(r.max_v)});
      max_dev = std::max({max_dev, r.max_k, r.max_v});
    }
    write_output(entry, "layer_profile.csv", layers.text());
    summary["max_kv_deviation"] = max_dev;
  }

  entry["summary"] = summary;
  finish("diagnose", std::move(entry));
  return summary;
}

json Pipeline::oracle() {
  require_corpus(corpus_);
  json entry = begin();
  const auto& refs = references();
  const auto ts = trials();
  DecodeConfig cfg = config_.decode;
  cfg.keep_logits = false;
  cfg.snapshot_kv = false;

  struct OracleTrial {
    std::optional<int> p_div;
    int repairs = 0;
    bool deterministic = false;
  };
  auto results = parallel_map(ts.size(), config_.workers, [&](std::size_t i) {
    const Trial& t = ts[i];
    const DecodeTrace& ref = refs[static_cast<std::size_t>(t.prompt)];
    auto plain = decode_batched(weights_, t.layout, cfg, config_.numerics, engine());
    OracleTrial out;
    out.p_div = find_first_divergence(plain[static_cast<std::size_t>(t.layout.protected_row)], ref);
    PolicyOptions po;
    po.reference = &ref;
    po.verifier = config_.verifier;
    po.engine = engine();
    const OracleRun run = run_oracle_repair(weights_, t.layout, cfg, config_.numerics, po);
    out.repairs = run.repairs;
    out.deterministic = run.deterministic;
    return out;
  });

  Csv per_trial({"prompt", "batch_size", "p_div", "repairs", "deterministic"});
  struct Agg {
    int trials = 0, diverging = 0, repairs = 0, deterministic = 0;
  };
  std::map<int, Agg> by_bs;
  Agg all;
  int diverging_without_repair = 0, clean_with_repair = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const auto& r = results[i];
    per_trial.row({num(ts[i].prompt), num(ts[i].batch_size), r.p_div ? num(*r.p_div) : std::string(),
                   num(r.repairs), r.deterministic ? "1" : "0"});
    for (Agg* a : {&by_bs[ts[i].batch_size], &all}) {
      ++a->trials;
      a->diverging += r.p_div ? 1 : 0;
      a->repairs += r.repairs;
      a->deterministic += r.deterministic ? 1 : 0;
    }
    if (r.p_div && r.repairs == 0) ++diverging_without_repair;
    if (!r.p_div && r.repairs != 0) ++clean_with_repair;
  }
  write_output(entry, "oracle_trials.csv", per_trial.text());

  Csv table({"batch_size", "trials", "diverging_trials", "repairs", "repairs_per_seq", "repairs_per_diverging_seq",
             "deterministic_trials", "determinism_rate"});
  json per_bs = json::object();
  auto emit = [&](const std::string& label, const Agg& a) {
    const double per_seq = safe_ratio(a.repairs, a.trials);
    const double per_div = safe_ratio(a.repairs, a.diverging);
    const double det = safe_ratio(a.deterministic, a.trials);
    table.row({label, num(a.trials), num(a.diverging), num(a.repairs), num(per_seq), num(per_div),
               num(a.deterministic), num(det)});
    return json{{"trials", a.trials},
                {"diverging_trials", a.diverging},
                {"repairs", a.repairs},
                {"repairs_per_seq", per_seq},
                {"repairs_per_diverging_seq", per_div},
                {"determinism_rate", det}};
  };
  for (const auto& [bs, a] : by_bs) per_bs[std::to_string(bs)] = emit(std::to_string(bs), a);
  json summary = emit("all", all);
  write_output(entry, "oracle.csv", table.text());
  summary["per_batch_size"] = per_bs;
  summary["all_deterministic"] = all.deterministic == all.trials;
  summary["diverging_without_repair"] = diverging_without_repair;
  summary["clean_with_repair"] = clean_with_repair;
  entry["summary"] = summary;
  finish("oracle", std::move(entry));
  return summary;
}

json Pipeline::gate() {
  require_corpus(corpus_);
  json entry = begin();
  const auto& refs = references();
  const auto ts = trials();
  DecodeConfig cfg = config_.decode;
  cfg.keep_logits = false;
  cfg.snapshot_kv = false;
  GateConfig gate = config_.gate;
  if (gate.mode == GateMode::oracle) throw ConfigError("gate.mode = oracle is served by the oracle command");

  auto runs = parallel_map(ts.size(), config_.workers, [&](std::size_t i) {
    const Trial& t = ts[i];
    PolicyOptions po;
    po.reference = &refs[static_cast<std::size_t>(t.prompt)];
    po.verifier = config_.verifier;
    po.engine = engine();
    PolicyRun run = run_margingate(weights_, t.layout, cfg, gate, config_.numerics, po);
    run.others.clear();
    run.trace = without_columns(std::move(run.trace));
    return run;
  });

  Csv log({"prompt", "batch_size", "step", "kind", "margin", "tentative", "final", "synchronous"});
  std::map<int, GateAggregate> by_bs;
  GateAggregate all;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    for (const auto& c : runs[i].commits) {
      log.row({num(ts[i].prompt), num(ts[i].batch_size), num(c.step), std::string(to_string(c.kind)),
               num(static_cast<double>(c.margin)), num(c.tentative), num(c.final_token), c.synchronous ? "1" : "0"});
    }
    const GateStats& s = runs[i].stats;
    for (GateAggregate* a : {&by_bs[ts[i].batch_size], &all}) {
      a->tau = gate.tau;
      ++a->trials;
      a->deterministic_trials += s.sequence_deterministic ? 1 : 0;
      a->steps += s.steps;
      a->sync_steps += s.sync_steps;
      a->triggered += s.triggered;
      a->repairs += s.repairs;
      a->verifier_prefix_tokens += s.verifier_prefix_tokens;
      a->always_verify_prefix_tokens += s.always_verify_prefix_tokens;
    }
  }
  write_output(entry, "commit_log.csv", log.text());

  Csv table({"batch_size", "tau", "mode", "trials", "sync_steps", "triggered", "r_verify", "repairs", "r_repair",
             "deterministic_trials", "determinism_rate", "verifier_prefix_tokens", "relative_cost"});
  auto emit = [&](const std::string& label, const GateAggregate& a) {
    table.row({label, num(gate.tau), std::string(to_string(gate.mode)), num(a.trials), num(a.sync_steps),
               num(a.triggered), num(a.trigger_rate()), num(a.repairs), num(a.repair_rate()),
               num(a.deterministic_trials), num(a.determinism_rate()), num(a.verifier_prefix_tokens),
               num(a.relative_cost())});
    return json{{"trials", a.trials},
                {"r_verify", a.trigger_rate()},
                {"r_repair", a.repair_rate()},
                {"repairs_per_seq", safe_ratio(a.repairs, a.trials)},
                {"determinism_rate", a.determinism_rate()},
                {"verifier_prefix_tokens", a.verifier_prefix_tokens},
                {"always_verify_prefix_tokens", a.always_verify_prefix_tokens},
                {"relative_cost", a.relative_cost()}};
  };
  json per_bs = json::object();
  for (const auto& [bs, a] : by_bs) per_bs[std::to_string(bs)] = emit(std::to_string(bs), a);
  json summary = emit("all", all);
  write_output(entry, "gate.csv", table.text());
  summary["tau"] = std::isinf(gate.tau) ? json("inf") : json(gate.tau);
  summary["mode"] = std::string(to_string(gate.mode));
  summary["per_batch_size"] = per_bs;
  entry["summary"] = summary;
  finish("gate", std::move(entry));
  return summary;
}

const CalibrationReport& Pipeline::calibration() {
  if (!calibration_) {
    require_corpus(corpus_);
    CalibrationOptions o;
    o.top_k = config_.calibration_top_k;
    o.source = config_.calibration_source;
    o.workers = config_.workers;
    o.engine = engine();
    calibration_ = measure_eps(weights_, corpus_, config_.batch_sizes, config_.layout, config_.protected_row,
                               config_.decode, config_.numerics, references(), o);
  }
  return *calibration_;
}

json Pipeline::calibrate() {
  json entry = begin();
  const auto& report = calibration();
  Csv table({"config", "samples", "median_eps", "max_eps", "pert_tau"});
  json rows = json::array();
  for (const auto& r : report.rows) {
    table.row({r.label, num(r.eps.samples), num(r.eps.median), num(r.eps.max), num(r.eps.pert_tau)});
    rows.push_back({{"config", r.label},
                    {"median_eps", r.eps.median},
                    {"max_eps", r.eps.max},
                    {"pert_tau", r.eps.pert_tau}});
  }
  write_output(entry, "calibration.csv", table.text());
  json summary = {{"rows", rows},
                  {"pert_tau", report.overall().eps.pert_tau},
                  {"max_eps", report.overall().eps.max},
                  {"median_eps", report.overall().eps.median},
                  {"topk_source", std::string(to_string(config_.calibration_source))}};
  entry["summary"] = summary;
  finish("calibrate", std::move(entry));
  return summary;
}

const SweepResult& Pipeline::sweep_result() {
  if (!sweep_) {
    SweepPlan plan;
    plan.base = config_.sweep_grid_base();
    plan.cover = calibration().overall().eps.pert_tau;
    plan.max_tau = config_.sweep_max_tau;
    plan.append_infinity = config_.sweep_infinity;
    sweep_ = sweep_tau(weights_, trials(), references(), config_.decode, plan, config_.numerics, gate_options());
  }
  return *sweep_;
}

json Pipeline::sweep() {
  json entry = begin();
  const auto& result = sweep_result();
  Csv table({"tau", "trials", "sync_steps", "triggered", "trigger_rate", "repairs", "repair_rate",
             "deterministic_trials", "determinism_rate", "verifier_prefix_tokens", "relative_cost", "tau100"});
  bool monotone = true;
  json grid = json::array();
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    const auto& r = result.rows[i];
    if (i > 0 && r.trigger_rate() < result.rows[i - 1].trigger_rate()) monotone = false;
    const bool is100 = result.tau100 && *result.tau100 == r.tau;
    table.row({num(r.tau), num(r.trials), num(r.sync_steps), num(r.triggered), num(r.trigger_rate()),
               num(r.repairs), num(r.repair_rate()), num(r.deterministic_trials), num(r.determinism_rate()),
               num(r.verifier_prefix_tokens), num(r.relative_cost()), is100 ? "1" : "0"});
    grid.push_back({{"tau", std::isinf(r.tau) ? json("inf") : json(r.tau)},
                    {"trigger_rate", r.trigger_rate()},
                    {"determinism_rate", r.determinism_rate()}});
  }
  write_output(entry, "pareto.csv", table.text());
  json summary = {{"grid", grid},
                  {"pert_tau", calibration().overall().eps.pert_tau},
                  {"trigger_monotone", monotone},
                  {"no_deterministic_point", result.no_deterministic_point}};
  if (result.tau100) {
    summary["tau100"] = std::isinf(*result.tau100) ? json("inf") : json(*result.tau100);
    for (const auto& r : result.rows) {
      if (r.tau == *result.tau100) {
        summary["tau100_trigger_rate"] = r.trigger_rate();
        summary["tau100_relative_cost"] = r.relative_cost();
      }
    }
  } else {
    summary["tau100"] = nullptr;
  }
  entry["summary"] = summary;
  finish("sweep", std::move(entry));
  return summary;
}

json Pipeline::transfer() {
  require_corpus(corpus_);
  json entry = begin();
  double tau = 0.0;
  std::string tau_source;
  if (config_.transfer_tau) {
    tau = *config_.transfer_tau;
    tau_source = "config";
  } else {
    const json* prior = nullptr;
    if (manifest_["commands"].contains("sweep")) prior = &manifest_["commands"]["sweep"]["summary"];
    if (!sweep_ && prior && prior->contains("tau100") && !(*prior)["tau100"].is_null()) {
      const json& v = (*prior)["tau100"];
      tau = v.is_string() ? kInfiniteTau : v.get<double>();
      tau_source = "manifest";
    } else {
      const auto& result = sweep_result();
      tau = result.tau100.value_or(kInfiniteTau);
      tau_source = "sweep";
    }
  }

  std::vector<TransferCorpus> corpora;
  corpora.push_back({"calibration", trials(), references()});
  for (const auto& spec : config_.transfer_corpora) {
    TransferCorpus c;
    c.name = spec.name;
    const Corpus corpus = generate_corpus(spec.corpus, config_.model.vocab);
    c.trials = make_trials(corpus, config_.batch_sizes, config_.layout, config_.protected_row);
    DecodeConfig rcfg = config_.decode;
    rcfg.snapshot_kv = false;
    c.references = reference_traces(weights_, corpus, rcfg, config_.workers);
    corpora.push_back(std::move(c));
  }
  const auto rows = transfer_check(weights_, tau, corpora, config_.decode, config_.numerics, gate_options());

  Csv table({"corpus", "tau", "trials", "sync_steps", "trigger_rate", "repair_rate", "determinism_rate",
             "verifier_prefix_tokens", "relative_cost"});
  json out = json::array();
  for (const auto& r : rows) {
    const auto& a = r.result;
    table.row({r.corpus, num(tau), num(a.trials), num(a.sync_steps), num(a.trigger_rate()), num(a.repair_rate()),
               num(a.determinism_rate()), num(a.verifier_prefix_tokens), num(a.relative_cost())});
    out.push_back({{"corpus", r.corpus},
                   {"trigger_rate", a.trigger_rate()},
                   {"repair_rate", a.repair_rate()},
                   {"determinism_rate", a.determinism_rate()},
                   {"relative_cost", a.relative_cost()}});
  }
  write_output(entry, "transfer.csv", table.text());
  json summary = {{"tau", std::isinf(tau) ? json("inf") : json(tau)}, {"tau_source", tau_source}, {"corpora", out}};
  entry["summary"] = summary;
  finish("transfer", std::move(entry));
  return summary;
}

std::string Pipeline::report() {
  std::ostringstream s;
  s << "margingate " << tool_version() << "  config " << config_.hash() << "\n";
  const json& cmds = manifest_["commands"];
  auto show = [&](const char* name, const char* key) {
    if (!cmds.contains(name)) return;
    const json& sum = cmds[name]["summary"];
    if (sum.contains(key)) s << "  " << name << "." << key << " = " << sum[key].dump() << "\n";
  };
  show("gen-corpus", "prompts");
  show("diagnose", "flip_rate");
  show("diagnose", "diverging_trials");
  show("diagnose", "in_tuned_band");
  show("diagnose", "kv");
  show("oracle", "repairs_per_seq");
  show("oracle", "all_deterministic");
  show("gate", "tau");
  show("gate", "r_verify");
  show("gate", "r_repair");
  show("gate", "determinism_rate");
  show("calibrate", "pert_tau");
  show("sweep", "tau100");
  show("sweep", "trigger_monotone");
  show("transfer", "tau");
  show("transfer", "corpora");
  const std::string text = s.str();
  json entry = begin();
  write_output(entry, "report.txt", text);
  entry["summary"] = json::object();
  finish("report", std::move(entry));
  return text;
}

json Pipeline::run_all() {
  json out = json::object();
  out["gen-corpus"] = gen_corpus();
  out["diagnose"] = diagnose();
  out["oracle"] = oracle();
  out["gate"] = gate();
  out["calibrate"] = calibrate();
  out["sweep"] = sweep();
  out["transfer"] = transfer();
  report();
  return out;
}

}  // namespace margingate
