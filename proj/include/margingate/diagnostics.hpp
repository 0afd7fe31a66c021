#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "margingate/engines.hpp"
#include "margingate/kvcache.hpp"

namespace margingate {

// ---------------------------------------------------------------------------
// Token divergence and the synchronous flip rate.

/// Smallest index where the sequences differ. A sequence that has ended
/// while the other still has a token counts as differing at that index.
std::optional<int> find_first_divergence(std::span<const int> batched, std::span<const int> reference);
std::optional<int> find_first_divergence(const DecodeTrace& batched, const DecodeTrace& reference);

struct DivergenceReport {
  std::optional<int> p_div;
  std::int64_t sync_samples = 0;  // p_div + 1 on divergence, else trace length
  int events = 0;                 // 0 or 1
};

DivergenceReport make_divergence_report(const DecodeTrace& batched, const DecodeTrace& reference);

/// Sum of events over sum of synchronous samples. Throws UndefinedMetric on
/// an empty denominator.
double flip_rate(std::span<const DivergenceReport> trials);

// ---------------------------------------------------------------------------
// Divergence-aligned K/V deviation.

/// Per-position, per-layer deviation of one trial, with the content position
/// of the column that consumed the first divergent token (delta = 0).
struct KvTrialSeries {
  int zero_position = 0;
  std::vector<std::vector<LayerDeviation>> by_position;  // [position][layer]
};

/// Compares snapshots over the positions both traces cover. `p_div` is the
/// first divergent decode step; the delta = 0 column is at prompt_len + p_div.
/// Without a divergence zero_position is -1.
KvTrialSeries kv_series(const DecodeTrace& batched, const DecodeTrace& reference, std::optional<int> p_div);

struct KvAlignOptions {
  int pre_window = 64;   // delta in [-pre_window, -1] feeds pre-median and slopes
  int post_window = 32;  // reported delta range is [-pre_window, post_window]
};

struct KvDeltaPoint {
  int delta = 0;
  double mean_k = 0.0;
  double mean_v = 0.0;
  int trials = 0;
};

struct KvLayerSummary {
  double pre_median_k = 0.0;
  double pre_median_v = 0.0;
  std::optional<double> spike_k;   // mean at delta 0 over pre_median_k
  std::optional<double> spike_v;
  std::optional<double> slope_k;   // median of per-trial OLS slopes
  std::optional<double> slope_v;
  double at_zero_k = 0.0;
  double at_zero_v = 0.0;
};

struct KVDeviationProfile {
  int trials = 0;
  std::vector<std::vector<KvDeltaPoint>> series;  // [layer], ascending delta
  std::vector<KvLayerSummary> summary;            // [layer]
};

KVDeviationProfile align_kv_deviation(std::span<const KvTrialSeries> trials, KvAlignOptions options = {});

/// Ordinary least-squares slope of y on x. Needs two distinct x values.
std::optional<double> ols_slope(std::span<const double> x, std::span<const double> y);

/// Median; the mean of the two middle values for even counts.
double median(std::vector<double> values);

// ---------------------------------------------------------------------------
// Logit geometry.

/// N(delta) from a step's top-k window. Sets *exhausted when the window's
/// last value is still within delta of the top, in which case the count is
/// the window size (a lower bound).
int count_within(const StepRecord& step, double delta, bool* exhausted = nullptr);

/// 1-based rank of `token` inside the step's top-k window.
std::optional<int> rank_in_window(const StepRecord& step, int token);

struct GeometryTrial {
  const DecodeTrace* batched = nullptr;
  const DecodeTrace* reference = nullptr;
  std::optional<int> p_div;
};

struct LogitGeometry {
  std::vector<double> deltas;
  std::vector<double> stable_mean;
  std::vector<double> divergent_mean;
  std::vector<std::optional<double>> ratio;
  std::int64_t stable_steps = 0;
  std::int64_t divergent_steps = 0;
  std::int64_t exhausted_steps = 0;

  std::vector<int> rank_buckets;
  std::vector<double> rank_fraction;  // cumulative, by bucket
  std::int64_t identity_events = 0;
};

inline const std::vector<double> kDefaultGeometryDeltas{0.25, 0.5, 1.0, 2.0};
inline const std::vector<int> kDefaultRankBuckets{2, 3, 8, 50};

LogitGeometry logit_geometry(std::span<const GeometryTrial> trials,
                             std::span<const double> deltas = kDefaultGeometryDeltas,
                             std::span<const int> buckets = kDefaultRankBuckets);

/// Batched margins at every divergence event where both runs emitted a token.
std::vector<double> divergence_margins(std::span<const GeometryTrial> trials);

/// Fraction of event margins strictly below tau.
double margin_recall(std::span<const double> event_margins, double tau);

// ---------------------------------------------------------------------------
// Layer-wise structure.

struct LayerProfileRow {
  int layer = 0;
  double max_k = 0.0;  // per-trial max over positions, averaged over trials
  double max_v = 0.0;
};

struct LayerProfile {
  int trials = 0;
  std::vector<LayerProfileRow> rows;
  int first = 0;
  int mid = 0;
  int last = 0;
};

LayerProfile layer_profile(std::span<const KvTrialSeries> trials);

}  // namespace margingate
