#include "margingate/engines.hpp"

#include <algorithm>
#include <string>

#include "margingate/errors.hpp"
#include "margingate/logits.hpp"

namespace margingate {

BatchLayout BatchLayout::replicated(std::span<const int> prompt, int batch_size) {
  if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
  BatchLayout layout;
  layout.rows.assign(static_cast<std::size_t>(batch_size), std::vector<int>(prompt.begin(), prompt.end()));
  return layout;
}

int BatchLayout::storage_length() const {
  std::size_t longest = 0;
  for (const auto& r : rows) longest = std::max(longest, r.size());
  return static_cast<int>(longest) + extra_left_pad;
}

int BatchLayout::pad_count(int row) const {
  return storage_length() - static_cast<int>(rows.at(static_cast<std::size_t>(row)).size());
}

void BatchLayout::validate(int vocab) const {
  if (rows.empty()) throw InvalidArgument("BatchLayout: no rows");
  if (protected_row < 0 || protected_row >= batch_size()) {
    throw InvalidArgument("BatchLayout: protected_row out of range");
  }
  if (extra_left_pad < 0) throw InvalidArgument("BatchLayout: extra_left_pad must be >= 0");
  for (const auto& r : rows) {
    if (r.empty()) throw InvalidArgument("BatchLayout: empty prompt");
    for (int t : r) {
      if (t < 0 || t >= vocab) throw InvalidArgument("BatchLayout: token " + std::to_string(t) + " outside vocab");
    }
  }
}

void DecodeConfig::validate() const {
  if (max_new_tokens < 1) throw InvalidArgument("DecodeConfig: max_new_tokens must be >= 1");
  if (top_k < 2) throw InvalidArgument("DecodeConfig: top_k must be >= 2");
}

std::string_view to_string(StopReason r) noexcept { return r == StopReason::eos ? "eos" : "cap"; }

std::vector<int> DecodeTrace::tokens() const {
  std::vector<int> out;
  out.reserve(steps.size());
  for (const auto& s : steps) out.push_back(s.token);
  return out;
}

StepRecord make_step_record(std::span<const float> logits, int k) {
  TopK top = top_k(logits, k);
  StepRecord rec;
  rec.token = top.ids.front();
  rec.margin = margin(logits);
  rec.topk_ids = std::move(top.ids);
  rec.topk_values = std::move(top.values);
  return rec;
}

BatchRunner::BatchRunner(const Weights& weights, BatchLayout layout, DecodeConfig cfg,
                         NumericsProfile profile, EngineOptions options)
    : weights_(&weights),
      layout_(std::move(layout)),
      cfg_(cfg),
      profile_(std::move(profile)),
      share_(options.share_identical_rows && profile_.mode != NumericsMode::injected_noise),
      cache_(weights.spec.layers, std::max(1, layout_.batch_size()),
             std::max(1, layout_.storage_length() + cfg.max_new_tokens), weights.spec.heads,
             weights.spec.head_dim()) {
  layout_.validate(weights.spec.vocab);
  cfg_.validate();
  profile_.validate();
  if (cfg_.eos_token && (*cfg_.eos_token < 0 || *cfg_.eos_token >= weights.spec.vocab)) {
    throw InvalidArgument("DecodeConfig: eos_token outside vocab");
  }
  for (const auto& r : layout_.rows) {
    const auto needed = static_cast<std::int64_t>(r.size()) + cfg_.max_new_tokens - 1;
    if (needed > weights.spec.max_positions) {
      throw CapacityError("prompt of length " + std::to_string(r.size()) + " plus " +
                          std::to_string(cfg_.max_new_tokens) + " new tokens exceeds max_positions " +
                          std::to_string(weights.spec.max_positions));
    }
  }
  const int n = layout_.batch_size();
  rep_.resize(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    rep_[r] = r;
    if (!share_) continue;
    for (int s = 0; s < r; ++s) {
      if (rep_[s] == s && layout_.rows[s] == layout_.rows[r]) {
        rep_[r] = s;
        break;
      }
    }
  }
  dirty_.assign(static_cast<std::size_t>(n), false);
  finished_.assign(static_cast<std::size_t>(n), false);
  emitted_.resize(static_cast<std::size_t>(n));
  outputs_.resize(static_cast<std::size_t>(n));
  prefill();
}

void BatchRunner::prefill() {
  const int n = batch_size();
  const int storage = layout_.storage_length();
  std::vector<std::optional<StepOutput>> shared(static_cast<std::size_t>(n));
  for (int slot = 0; slot + 1 < storage; ++slot) {
    for (int r = 0; r < n; ++r) {
      const int pads = layout_.pad_count(r);
      if (slot < pads) {
        cache_.append_pad(r);
        continue;
      }
      const int pos = slot - pads;
      if (rep_[r] == r) {
        BatchContext ctx{n, r, -1 - slot};
        shared[r] = forward_step(*weights_, cache_, r, layout_.rows[r][pos], pos, profile_, ctx);
        ++forward_calls_;
        cache_.append_column(r, shared[r]->columns);
      } else {
        cache_.append_column(r, shared[rep_[r]]->columns);
      }
    }
  }
}

bool BatchRunner::done() const {
  return std::all_of(finished_.begin(), finished_.end(), [](bool f) { return f; });
}

int BatchRunner::input_token(int row) const {
  const auto& e = emitted_[row];
  return e.empty() ? layout_.rows[row].back() : e.back();
}

int BatchRunner::input_position(int row) const {
  return static_cast<int>(layout_.rows[row].size() + emitted_[row].size()) - 1;
}

void BatchRunner::detach(int row) {
  const int old_rep = rep_[row];
  rep_[row] = row;
  if (old_rep != row) return;
  int successor = -1;
  for (int r = 0; r < batch_size(); ++r) {
    if (r != row && rep_[r] == row) {
      if (successor < 0) successor = r;
      rep_[r] = successor;
    }
  }
}

void BatchRunner::refresh_sharing() {
  for (int r = 0; r < batch_size(); ++r) {
    if (dirty_[r]) {
      detach(r);
      dirty_[r] = false;
    }
  }
  for (int r = 0; r < batch_size(); ++r) {
    const int s = rep_[r];
    if (s == r) continue;
    if (finished_[r] != finished_[s] || input_token(r) != input_token(s) ||
        emitted_[r].size() != emitted_[s].size()) {
      detach(r);
    }
  }
}

const std::vector<std::optional<StepOutput>>& BatchRunner::step() {
  if (done()) throw InvalidArgument("BatchRunner::step called after every row finished");
  ++step_;
  refresh_sharing();
  const int n = batch_size();
  for (int r = 0; r < n; ++r) {
    outputs_[r].reset();
    if (finished_[r]) continue;
    if (rep_[r] == r) {
      BatchContext ctx{n, r, step_};
      outputs_[r] = forward_step(*weights_, cache_, r, input_token(r), input_position(r), profile_, ctx);
      ++forward_calls_;
    } else {
      outputs_[r] = outputs_[rep_[r]];
    }
    cache_.append_column(r, outputs_[r]->columns);
  }
  return outputs_;
}

void BatchRunner::commit(int row, int token) {
  if (finished_[row]) throw InvalidArgument("BatchRunner::commit on a finished row");
  emitted_[row].push_back(token);
  if ((cfg_.eos_token && token == *cfg_.eos_token) ||
      static_cast<int>(emitted_[row].size()) >= cfg_.max_new_tokens) {
    finished_[row] = true;
  }
}

void BatchRunner::overwrite_current_column(int row, const ColumnSet& columns) {
  cache_.overwrite_column(row, current_slot(row), columns);
  dirty_[row] = true;
}

std::vector<int> BatchRunner::committed_prefix(int row) const {
  std::vector<int> prefix = layout_.rows[row];
  prefix.insert(prefix.end(), emitted_[row].begin(), emitted_[row].end());
  return prefix;
}

std::vector<ColumnSet> BatchRunner::snapshot(int row) const {
  std::vector<ColumnSet> out;
  const int pads = layout_.pad_count(row);
  const int filled = cache_.filled(row);
  out.reserve(static_cast<std::size_t>(std::max(0, filled - pads)));
  for (int slot = pads; slot < filled; ++slot) out.push_back(cache_.read_column(row, slot));
  return out;
}

std::vector<DecodeTrace> decode_batched(const Weights& weights, const BatchLayout& layout,
                                        const DecodeConfig& cfg, const NumericsProfile& profile,
                                        EngineOptions options) {
  BatchRunner runner(weights, layout, cfg, profile, options);
  const int n = runner.batch_size();
  std::vector<DecodeTrace> traces(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) traces[r].prompt = layout.rows[r];
  while (!runner.done()) {
    const auto& outs = runner.step();
    for (int r = 0; r < n; ++r) {
      if (!outs[r]) continue;
      StepRecord rec = make_step_record(outs[r]->logits, cfg.top_k);
      runner.commit(r, rec.token);
      if (cfg.keep_logits) traces[r].logits.push_back(outs[r]->logits);
      traces[r].steps.push_back(std::move(rec));
    }
  }
  for (int r = 0; r < n; ++r) {
    auto& t = traces[r];
    t.stop = (cfg.eos_token && !t.steps.empty() && t.steps.back().token == *cfg.eos_token)
                 ? StopReason::eos
                 : StopReason::cap;
    if (cfg.snapshot_kv) t.columns = runner.snapshot(r);
  }
  return traces;
}

DecodeTrace decode_reference(const Weights& weights, std::span<const int> prompt, const DecodeConfig& cfg) {
  if (prompt.empty()) throw InvalidArgument("decode_reference: empty prompt");
  BatchLayout layout;
  layout.rows.emplace_back(prompt.begin(), prompt.end());
  return std::move(decode_batched(weights, layout, cfg, NumericsProfile::reference()).front());
}

Verifier::Verifier(const Weights& weights, Strategy strategy)
    : weights_(&weights),
      strategy_(strategy),
      cache_(weights.spec.layers, 1, weights.spec.max_positions, weights.spec.heads, weights.spec.head_dim()) {}

VerifyResult Verifier::verify(std::span<const int> prefix) {
  if (prefix.empty()) throw InvalidArgument("verify: empty prefix");
  if (static_cast<int>(prefix.size()) > weights_->spec.max_positions) {
    throw CapacityError("verify: prefix of length " + std::to_string(prefix.size()) +
                        " exceeds max_positions");
  }
  ++calls_;
  charged_ += static_cast<std::int64_t>(prefix.size());
  const NumericsProfile ref = NumericsProfile::reference();
  const int n = static_cast<int>(prefix.size());

  std::size_t keep = 0;
  if (strategy_ == Strategy::incremental) {
    while (keep < tokens_.size() && keep < prefix.size() && tokens_[keep] == prefix[keep]) ++keep;
    keep = std::min<std::size_t>(keep, prefix.size() - 1);
  }
  cache_.truncate(0, static_cast<int>(keep));
  tokens_.resize(keep);

  StepOutput last;
  for (int p = static_cast<int>(keep); p < n; ++p) {
    last = forward_step(*weights_, cache_, 0, prefix[p], p, ref, BatchContext{});
    ++forward_calls_;
    cache_.append_column(0, last.columns);
    tokens_.push_back(prefix[p]);
  }
  VerifyResult out;
  out.token = argmax(last.logits);
  out.columns = std::move(last.columns);
  out.logits = std::move(last.logits);
  return out;
}

VerifyResult verify_step(const Weights& weights, std::span<const int> committed_prefix) {
  Verifier v(weights, Verifier::Strategy::full_recompute);
  return v.verify(committed_prefix);
}

}  // namespace margingate
