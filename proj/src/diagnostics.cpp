#include "margingate/diagnostics.hpp"

#include <algorithm>
#include <map>

#include "margingate/errors.hpp"

namespace margingate {

std::optional<int> find_first_divergence(std::span<const int> batched, std::span<const int> reference) {
  const std::size_t n = std::min(batched.size(), reference.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (batched[i] != reference[i]) return static_cast<int>(i);
  }
  if (batched.size() == reference.size()) return std::nullopt;
  return static_cast<int>(n);
}

std::optional<int> find_first_divergence(const DecodeTrace& batched, const DecodeTrace& reference) {
  const auto b = batched.tokens();
  const auto r = reference.tokens();
  return find_first_divergence(b, r);
}

DivergenceReport make_divergence_report(const DecodeTrace& batched, const DecodeTrace& reference) {
  DivergenceReport rep;
  rep.p_div = find_first_divergence(batched, reference);
  if (rep.p_div) {
    rep.sync_samples = *rep.p_div + 1;
    rep.events = 1;
  } else {
    rep.sync_samples = static_cast<std::int64_t>(batched.length());
  }
  return rep;
}

double flip_rate(std::span<const DivergenceReport> trials) {
  std::int64_t events = 0;
  std::int64_t samples = 0;
  for (const auto& t : trials) {
    events += t.events;
    samples += t.sync_samples;
  }
  if (samples == 0) throw UndefinedMetric("flip_rate: no synchronous samples");
  return static_cast<double>(events) / static_cast<double>(samples);
}

KvTrialSeries kv_series(const DecodeTrace& batched, const DecodeTrace& reference, std::optional<int> p_div) {
  if (batched.columns.empty() || reference.columns.empty()) {
    throw InvalidArgument("kv_series: both traces need K/V snapshots");
  }
  KvTrialSeries out;
  out.zero_position = p_div ? static_cast<int>(batched.prompt.size()) + *p_div : -1;
  const std::size_t n = std::min(batched.columns.size(), reference.columns.size());
  out.by_position.reserve(n);
  for (std::size_t p = 0; p < n; ++p) {
    out.by_position.push_back(column_deviation(batched.columns[p], reference.columns[p]));
  }
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) throw EmptyInput("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::optional<double> ols_slope(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidArgument("ols_slope: length mismatch");
  if (x.size() < 2) return std::nullopt;
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx == 0.0) return std::nullopt;
  return sxy / sxx;
}

KVDeviationProfile align_kv_deviation(std::span<const KvTrialSeries> trials, KvAlignOptions options) {
  std::vector<const KvTrialSeries*> diverging;
  for (const auto& t : trials) {
    if (t.zero_position >= 0 && !t.by_position.empty()) diverging.push_back(&t);
  }
  if (diverging.empty()) throw EmptyInput("align_kv_deviation: no diverging trials");

  const std::size_t layers = diverging.front()->by_position.front().size();
  struct Acc {
    double k = 0.0;
    double v = 0.0;
    int n = 0;
  };
  std::vector<std::map<int, Acc>> sums(layers);
  std::vector<std::vector<double>> slopes_k(layers), slopes_v(layers);

  for (const KvTrialSeries* t : diverging) {
    std::vector<double> xs;
    std::vector<std::vector<double>> yk(layers), yv(layers);
    for (std::size_t p = 0; p < t->by_position.size(); ++p) {
      const int delta = static_cast<int>(p) - t->zero_position;
      if (delta < -options.pre_window || delta > options.post_window) continue;
      const auto& devs = t->by_position[p];
      if (devs.size() != layers) throw InvalidArgument("align_kv_deviation: layer count mismatch");
      for (std::size_t l = 0; l < layers; ++l) {
        auto& a = sums[l][delta];
        a.k += devs[l].k;
        a.v += devs[l].v;
        ++a.n;
      }
      if (delta < 0) {
        xs.push_back(delta);
        for (std::size_t l = 0; l < layers; ++l) {
          yk[l].push_back(devs[l].k);
          yv[l].push_back(devs[l].v);
        }
      }
    }
    for (std::size_t l = 0; l < layers; ++l) {
      if (auto s = ols_slope(xs, yk[l])) slopes_k[l].push_back(*s);
      if (auto s = ols_slope(xs, yv[l])) slopes_v[l].push_back(*s);
    }
  }

  KVDeviationProfile prof;
  prof.trials = static_cast<int>(diverging.size());
  prof.series.resize(layers);
  prof.summary.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<double> pre_k, pre_v;
    for (const auto& [delta, a] : sums[l]) {
      KvDeltaPoint pt{delta, a.k / a.n, a.v / a.n, a.n};
      prof.series[l].push_back(pt);
      if (delta < 0) {
        pre_k.push_back(pt.mean_k);
        pre_v.push_back(pt.mean_v);
      }
    }
    KvLayerSummary& s = prof.summary[l];
    if (!pre_k.empty()) {
      s.pre_median_k = median(pre_k);
      s.pre_median_v = median(pre_v);
    }
    if (auto it = sums[l].find(0); it != sums[l].end()) {
      s.at_zero_k = it->second.k / it->second.n;
      s.at_zero_v = it->second.v / it->second.n;
      if (s.pre_median_k > 0.0) s.spike_k = s.at_zero_k / s.pre_median_k;
      if (s.pre_median_v > 0.0) s.spike_v = s.at_zero_v / s.pre_median_v;
    }
    if (!slopes_k[l].empty()) s.slope_k = median(slopes_k[l]);
    if (!slopes_v[l].empty()) s.slope_v = median(slopes_v[l]);
  }
  return prof;
}

int count_within(const StepRecord& step, double delta, bool* exhausted) {
  if (step.topk_values.empty()) throw InvalidArgument("count_within: empty top-k window");
  const double floor = static_cast<double>(step.topk_values.front()) - delta;
  int n = 0;
  for (float v : step.topk_values) {
    if (static_cast<double>(v) >= floor) ++n;
  }
  if (exhausted != nullptr) *exhausted = static_cast<double>(step.topk_values.back()) >= floor;
  return n;
}

std::optional<int> rank_in_window(const StepRecord& step, int token) {
  for (std::size_t i = 0; i < step.topk_ids.size(); ++i) {
    if (step.topk_ids[i] == token) return static_cast<int>(i) + 1;
  }
  return std::nullopt;
}

namespace {

bool has_event(const GeometryTrial& t) {
  return t.p_div && static_cast<std::size_t>(*t.p_div) < t.batched->length() &&
         static_cast<std::size_t>(*t.p_div) < t.reference->length();
}

}  // namespace

LogitGeometry logit_geometry(std::span<const GeometryTrial> trials, std::span<const double> deltas,
                             std::span<const int> buckets) {
  LogitGeometry g;
  g.deltas.assign(deltas.begin(), deltas.end());
  g.rank_buckets.assign(buckets.begin(), buckets.end());
  std::vector<double> stable_sum(deltas.size(), 0.0), div_sum(deltas.size(), 0.0);
  std::vector<std::int64_t> bucket_hits(buckets.size(), 0);
  const double widest = deltas.empty() ? 0.0 : *std::max_element(deltas.begin(), deltas.end());

  auto tally = [&](const StepRecord& step, std::vector<double>& sums) {
    bool exhausted = false;
    for (std::size_t i = 0; i < deltas.size(); ++i) sums[i] += count_within(step, deltas[i]);
    count_within(step, widest, &exhausted);
    if (exhausted) ++g.exhausted_steps;
  };

  for (const auto& t : trials) {
    const std::size_t stable_end = t.p_div ? static_cast<std::size_t>(*t.p_div) : t.batched->length();
    for (std::size_t s = 0; s < std::min(stable_end, t.batched->length()); ++s) {
      tally(t.batched->steps[s], stable_sum);
      ++g.stable_steps;
    }
    if (!has_event(t)) continue;
    const StepRecord& step = t.batched->steps[static_cast<std::size_t>(*t.p_div)];
    tally(step, div_sum);
    ++g.divergent_steps;
    ++g.identity_events;
    const int ref_token = t.reference->steps[static_cast<std::size_t>(*t.p_div)].token;
    const auto rank = rank_in_window(step, ref_token);
    for (std::size_t b = 0; b < buckets.size(); ++b) {
      if (rank && *rank <= buckets[b]) ++bucket_hits[b];
    }
  }

  for (std::size_t i = 0; i < deltas.size(); ++i) {
    const double sm = g.stable_steps ? stable_sum[i] / static_cast<double>(g.stable_steps) : 0.0;
    const double dm = g.divergent_steps ? div_sum[i] / static_cast<double>(g.divergent_steps) : 0.0;
    g.stable_mean.push_back(sm);
    g.divergent_mean.push_back(dm);
    g.ratio.push_back(g.stable_steps && g.divergent_steps && sm > 0.0 ? std::optional<double>(dm / sm)
                                                                     : std::nullopt);
  }
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    g.rank_fraction.push_back(g.identity_events ? static_cast<double>(bucket_hits[b]) /
                                                      static_cast<double>(g.identity_events)
                                                : 0.0);
  }
  return g;
}

std::vector<double> divergence_margins(std::span<const GeometryTrial> trials) {
  std::vector<double> out;
  for (const auto& t : trials) {
    if (has_event(t)) out.push_back(t.batched->steps[static_cast<std::size_t>(*t.p_div)].margin);
  }
  return out;
}

double margin_recall(std::span<const double> event_margins, double tau) {
  if (event_margins.empty()) throw UndefinedMetric("margin_recall: no divergence events");
  const auto hits = std::count_if(event_margins.begin(), event_margins.end(), [&](double m) { return m < tau; });
  return static_cast<double>(hits) / static_cast<double>(event_margins.size());
}

LayerProfile layer_profile(std::span<const KvTrialSeries> trials) {
  LayerProfile prof;
  std::size_t layers = 0;
  for (const auto& t : trials) {
    if (!t.by_position.empty()) {
      layers = t.by_position.front().size();
      break;
    }
  }
  prof.rows.resize(layers);
  for (std::size_t l = 0; l < layers; ++l) prof.rows[l].layer = static_cast<int>(l);
  for (const auto& t : trials) {
    if (t.by_position.empty()) continue;
    ++prof.trials;
    for (std::size_t l = 0; l < layers; ++l) {
      double mk = 0.0;
      double mv = 0.0;
      for (const auto& devs : t.by_position) {
        mk = std::max(mk, static_cast<double>(devs[l].k));
        mv = std::max(mv, static_cast<double>(devs[l].v));
      }
      prof.rows[l].max_k += mk;
      prof.rows[l].max_v += mv;
    }
  }
  if (prof.trials > 0) {
    for (auto& r : prof.rows) {
      r.max_k /= prof.trials;
      r.max_v /= prof.trials;
    }
  }
  const int n = static_cast<int>(layers);
  prof.first = 0;
  prof.mid = n / 2;
  prof.last = n > 0 ? n - 1 : 0;
  return prof;
}

}  // namespace margingate
