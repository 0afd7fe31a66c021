#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "margingate/calibration.hpp"
#include "margingate/config.hpp"
#include "margingate/corpus.hpp"
#include "margingate/model.hpp"

namespace margingate {

std::string tool_version();

/// Drives the subcommands over one config and output directory. Every
/// command writes its CSVs plus an entry in `manifest.json`; the manifest
/// is kept across commands as long as the config hash matches.
class Pipeline {
 public:
  Pipeline(RunConfig config, std::filesystem::path out);

  nlohmann::json gen_corpus();
  nlohmann::json diagnose();
  nlohmann::json oracle();
  nlohmann::json gate();
  nlohmann::json calibrate();
  nlohmann::json sweep();
  nlohmann::json transfer();
  /// Plain-text summary of the manifest; also written to report.txt.
  std::string report();
  /// Every command in order.
  nlohmann::json run_all();

  const RunConfig& config() const noexcept { return config_; }
  const Weights& weights() const noexcept { return weights_; }
  const Corpus& corpus() const noexcept { return corpus_; }
  const nlohmann::json& manifest() const noexcept { return manifest_; }
  const std::filesystem::path& out_dir() const noexcept { return out_; }

 private:
  std::vector<Trial> trials() const;
  const std::vector<DecodeTrace>& references();
  EngineOptions engine() const;
  GateRunOptions gate_options() const;
  const CalibrationReport& calibration();
  const SweepResult& sweep_result();

  void write_output(nlohmann::json& entry, const std::string& name, const std::string& content);
  void finish(const std::string& command, nlohmann::json entry);
  nlohmann::json begin() const;

  RunConfig config_;
  std::filesystem::path out_;
  Weights weights_;
  Corpus corpus_;
  nlohmann::json manifest_;
  std::optional<std::vector<DecodeTrace>> references_;
  std::optional<CalibrationReport> calibration_;
  std::optional<SweepResult> sweep_;
};

}  // namespace margingate
