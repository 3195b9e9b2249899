#pragma once

// Flat key=value run configuration.  One line per key ("key = value"), '#'
// comments, blank lines ignored.  Every key has a default, unknown keys are
// rejected by name, and parse(serialize(c)) == c exactly (floats are written
// with shortest-round-trip formatting).

#include <cstdint>
#include <string>

#include "mos/flow.hpp"
#include "mos/model.hpp"

namespace mos {

enum class TrainObjective { kGeneration, kEditing };

struct RunConfig {
  ModelConfig model;       // ModelConfig::desk_default()
  TrainConfig train;
  SampleSchedule sampling;
  TrainObjective objective = TrainObjective::kGeneration;
  uint64_t seed = 1;
  int dataset_size = 64;
  uint64_t dataset_seed = 1;
  int train_steps = 10000;
  int checkpoint_every = 1000;
  int log_every = 50;
  std::string output_dir = "runs/default";

  static RunConfig defaults();
  bool operator==(const RunConfig&) const = default;
};

// Canonical text form: every key, fixed order, one per line.
std::string serialize_config(const RunConfig& cfg);

// Starts from defaults and applies each line; throws std::invalid_argument
// naming the offending key for unknown keys or unparseable values.
RunConfig parse_config(const std::string& text);

// Reads and parses a file; throws std::runtime_error if it cannot be read.
RunConfig load_config(const std::string& path);

// Applies one "key=value" override to an existing config (same errors as
// parse_config); used for command-line --set flags.
void apply_config_override(RunConfig& cfg, const std::string& assignment);

}  // namespace mos
