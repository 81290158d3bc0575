#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "transip/eval.hpp"
#include "transip/lj_oracle.hpp"
#include "transip/model.hpp"
#include "transip/train.hpp"

namespace transip {

struct DataConfig {
  std::string path = "data/train.jsonl";
  std::string eval_path;  // empty: evaluate on the training file
  GeneratorConfig generator;
};

struct ProbeConfig {
  std::size_t rotations = kDefaultProbeRotations;
  std::uint64_t seed = kDefaultProbeSeed;
};

/// Everything a command needs, read from an INI file with sections [model],
/// [train], [data], [probe] and [output]. Every key has a default; unknown
/// sections or keys are rejected.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  ProbeConfig probe;
  std::string out_dir = "run";

  /// Throws ConfigError.
  void validate() const;
};

/// Throws ConfigError naming the key for unknown keys or unparsable values.
RunConfig parse_run_config(std::istream& in);
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies one "section.key=value" override.
void apply_override(RunConfig& config, const std::string& assignment);
void set_value(RunConfig& config, const std::string& section, const std::string& key, const std::string& value);

/// The fully resolved config as INI text; parse_run_config reads it back.
std::string to_ini(const RunConfig& config);

/// Every accepted "section.key", in file order.
std::vector<std::string> run_config_keys();

}  // namespace transip
