#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "margingate/config.hpp"
#include "margingate/errors.hpp"
#include "margingate/pipeline.hpp"

namespace mg = margingate;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kBadConfig = 2, kCapacity = 3, kInvariant = 4 };

struct Common {
  std::string config_path;
  std::string out;
  int workers = 0;
  std::optional<std::uint64_t> seed;
};

mg::RunConfig resolve(const Common& c) {
  mg::RunConfig cfg = c.config_path.empty() ? mg::RunConfig{} : mg::load_config(c.config_path);
  if (!c.out.empty()) cfg.out = c.out;
  if (c.workers > 0) cfg.workers = c.workers;
  if (c.seed) cfg.corpus.seed = *c.seed;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Batch-shape token-flip simulator and margin-gated verification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", mg::tool_version());

  Common common;
  struct Command {
    const char* name;
    const char* help;
  };
  const Command commands[] = {
      {"gen-corpus", "Write the seeded prompt corpus"},
      {"diagnose", "Flip rate, K/V deviation, logit geometry and recall tables"},
      {"oracle", "Oracle single-column repair"},
      {"gate", "MarginGate at the configured threshold"},
      {"calibrate", "Measure the logit perturbation and the sweep range"},
      {"sweep", "Threshold sweep and the smallest deterministic threshold"},
      {"transfer", "Fixed-threshold transfer to held-out corpora"},
      {"report", "Summarise the manifest of an output directory"},
  };
  for (const auto& cmd : commands) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", common.config_path, "Config file (key = value lines)")->check(CLI::ExistingFile);
    sub->add_option("--out", common.out, "Output directory (overrides run.out)");
    sub->add_option("--workers", common.workers, "Worker threads (overrides run.workers)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--seed", common.seed, "Corpus seed (overrides corpus.seed)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadConfig;
  }

  try {
    const mg::RunConfig cfg = resolve(common);
    mg::Pipeline pipeline(cfg, cfg.out);
    const std::string name = app.get_subcommands().front()->get_name();
    nlohmann::json summary;
    if (name == "gen-corpus") summary = pipeline.gen_corpus();
    else if (name == "diagnose") summary = pipeline.diagnose();
    else if (name == "oracle") summary = pipeline.oracle();
    else if (name == "gate") summary = pipeline.gate();
    else if (name == "calibrate") summary = pipeline.calibrate();
    else if (name == "sweep") summary = pipeline.sweep();
    else if (name == "transfer") summary = pipeline.transfer();
    else if (name == "report") {
      std::cout << pipeline.report();
      return kOk;
    }
    std::cout << summary.dump(2) << '\n';
    return kOk;
  } catch (const mg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kBadConfig;
  } catch (const mg::CapacityError& e) {
    std::cerr << "capacity error: " << e.what() << '\n';
    return kCapacity;
  } catch (const mg::EmptyInput& e) {
    std::cerr << "corpus error: " << e.what() << '\n';
    return kCapacity;
  } catch (const mg::InvariantViolation& e) {
    std::cerr << "invariant violation: " << e.what() << '\n';
    return kInvariant;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}
