#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include "json.hpp"
#include "transip/model.hpp"
#include "transip/train.hpp"

namespace transip {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model_config;
  TrainConfig train_config;
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::size_t total_steps = 0;
  std::string dataset_digest;
  Parameters parameters;
  std::optional<OptimizerState> optimizer;
};

nlohmann::json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Binary layout, little endian:
///   "TIPC", u32 version, u64 length + UTF-8 JSON header,
///   u64 record count, records of (u32 path length, path, u32 rank,
///   u64 dims[rank], f64 values), then the SHA-256 of all preceding bytes.
/// Optimizer moments are stored as extra records under "optimizer.m." and
/// "optimizer.v." prefixes.
void checkpoint_write(std::ostream& out, const Checkpoint& checkpoint);
void checkpoint_write(const std::filesystem::path& path, const Checkpoint& checkpoint);

/// Throws DataError for bad magic, an unsupported version, a digest mismatch
/// or a truncated file (naming the byte offset).
Checkpoint checkpoint_read(std::istream& in);
Checkpoint checkpoint_read(const std::filesystem::path& path);

/// Builds a checkpoint of a model and optimizer at the given progress.
Checkpoint make_checkpoint(const Model& model, const TrainConfig& config, const OptimizerState* optimizer,
                           std::size_t epoch, std::size_t total_steps, const std::string& dataset_digest);

/// The model stored in a checkpoint.
Model load_model(const Checkpoint& checkpoint);

}  // namespace transip
