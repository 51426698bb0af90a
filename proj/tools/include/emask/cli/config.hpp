#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "emask/cli/ini.hpp"
#include "emask/datagen.hpp"
#include "emask/trainer.hpp"

namespace emask::cli {

struct RunConfig {
  ExperimentConfig experiment;
  /// Load the dataset from this directory; otherwise generate it from `spec`.
  std::optional<std::string> dataset_path;
  SyntheticSpec spec;
  std::vector<std::uint64_t> seeds;
  /// Write measured seconds into the metrics CSV (breaks byte-identical reruns).
  bool wall_clock = false;
};

/// Sections: [dataset] [model] [train] [masking] [experiment].
/// Required: experiment.method, experiment.seeds (unless `require_experiment`
/// is false, as for dataset-only documents). Unknown keys are errors.
RunConfig parse_run_config(const IniDocument& doc, bool require_experiment = true);
RunConfig load_run_config(const std::string& path, bool require_experiment = true);

/// Full config with every field spelled out; parse_run_config(to_ini(c)) == c.
IniDocument to_ini(const RunConfig& cfg);

std::vector<std::uint64_t> parse_seed_list(const std::string& text);
std::string format_seed_list(const std::vector<std::uint64_t>& seeds);

/// Loads or generates the dataset; paths are checked here.
Dataset resolve_dataset(const RunConfig& cfg);

}  // namespace emask::cli
