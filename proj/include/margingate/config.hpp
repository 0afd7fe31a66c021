#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "margingate/calibration.hpp"
#include "margingate/corpus.hpp"
#include "margingate/diagnostics.hpp"
#include "margingate/model.hpp"
#include "margingate/numerics.hpp"
#include "margingate/policy.hpp"

namespace margingate {

struct TransferCorpusSpec {
  std::string name;
  CorpusSpec corpus;
};

/// Everything a pipeline run depends on. Serialised as flat `key = value`
/// lines with dotted sections; see configs/README.md for the grammar.
struct RunConfig {
  ModelSpec model;
  NumericsProfile numerics = NumericsProfile::reduction_order({{1, 1}, {2, 2}, {4, 4}, {8, 8}, {16, 16}});
  CorpusSpec corpus;
  std::optional<std::string> corpus_file;  // read prompts from here instead of generating
  DecodeConfig decode;
  std::vector<int> batch_sizes{2, 4, 8, 16};
  LayoutKind layout = LayoutKind::replicated;
  int protected_row = 0;
  GateConfig gate{0.0625, GateMode::margin_gate};
  Verifier::Strategy verifier = Verifier::Strategy::incremental;
  bool share_rows = true;

  int calibration_top_k = 50;
  TopkSource calibration_source = TopkSource::reference;

  std::vector<double> sweep_base{0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0};
  double sweep_scale = 1.0 / 64.0;
  double sweep_max_tau = 4.0;
  bool sweep_infinity = true;

  std::optional<double> transfer_tau;  // empty: take tau100 from a sweep
  std::vector<TransferCorpusSpec> transfer_corpora;

  KvAlignOptions kv;
  std::vector<double> geometry_deltas = kDefaultGeometryDeltas;
  std::vector<int> rank_buckets = kDefaultRankBuckets;
  std::vector<double> recall_taus{0.0625, 0.125, 0.25, 0.5};
  bool export_traces = false;  // one CSV per trial under traces/

  int workers = 1;
  std::string out = "out";

  RunConfig();

  void validate() const;

  /// Canonical text: every key, sorted, one per line.
  std::string to_text() const;
  /// FNV-1a over the canonical text, excluding the run.* section.
  std::string hash() const;

  std::vector<double> sweep_grid_base() const;
};

/// Starts from the defaults and applies every assignment. Unknown keys,
/// duplicates and malformed values throw ConfigError.
RunConfig parse_config(std::istream& in, const std::string& source = "<config>");
RunConfig load_config(const std::filesystem::path& path);

/// Applies one `key = value` assignment.
void set_config_value(RunConfig& config, const std::string& key, const std::string& value);

std::string format_double(double value);

}  // namespace margingate
