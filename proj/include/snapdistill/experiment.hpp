#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "snapdistill/trainer.hpp"

namespace snapdistill {

/// Flat `key = value` settings. Later layers override earlier ones
/// (defaults < config file < command line).
using Settings = std::map<std::string, std::string>;

/// Parses `key = value` lines; `#` starts a comment. Dashes in keys are
/// normalized to underscores. Throws ConfigError naming the line on syntax errors.
Settings parse_settings(const std::string& text, const std::string& source = "<text>");
Settings load_settings(const std::filesystem::path& path);

/// Every key accepted in config files and as `--key` overrides.
const std::vector<std::string>& known_setting_keys();

struct DataConfig {
  /// "synth" or a directory holding train.bin and test.bin records.
  std::string source = "synth";
  SynthSpec synth;
  ImageFormat image;
};

struct ExperimentConfig {
  RunConfig run;
  DataConfig data;
  std::filesystem::path out_dir = "runs";
  std::string run_id;  // derived from mode/model/seed when empty
  std::vector<std::uint64_t> seeds;  // sweep; empty means run.seed only
  std::optional<std::filesystem::path> resume;
  std::optional<std::uint64_t> fork_seed;
  bool restart_schedule = false;
  bool checkpoints = true;
  bool verbose = false;
  std::string model_name = "mlp";
};

/// Merges settings over defaults and validates. Unknown keys and invalid
/// combinations throw ConfigError naming the offending key.
ExperimentConfig build_experiment(const Settings& settings);

DatasetPair load_data(const DataConfig& data);

struct ExperimentOutcome {
  std::filesystem::path run_dir;
  EvalReport report;
  TrainResult<float> result;
};

/// Trains one run and writes metrics.csv, boundary checkpoints and summary.txt
/// under out_dir/run_id.
ExperimentOutcome run_experiment(const ExperimentConfig& config, const DatasetPair& data);

/// Per-generation, best-epoch, final and ensemble errors for a finished run.
EvalReport make_report(const TrainResult<float>& result, const RunConfig& config, const Dataset& test);

/// JSON summary text written to summary.txt.
std::string format_summary(const EvalReport& report, const ExperimentConfig& config, std::uint64_t seed);

std::vector<MetricsRecord> read_metrics_csv(const std::filesystem::path& path);

}  // namespace snapdistill
