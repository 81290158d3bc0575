#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "transip/batch.hpp"
#include "transip/losses.hpp"
#include "transip/model.hpp"

namespace transip {

enum class TrainMode { kTransIP, kTransAug };

std::string to_string(TrainMode mode);
/// Accepts "transip" or "transaug"; throws ConfigError otherwise.
TrainMode parse_train_mode(const std::string& text);

struct TrainConfig {
  double learning_rate = 5e-4;
  double weight_decay = 1e-3;
  double grad_clip_norm = 200.0;
  double warmup_fraction = 0.01;
  double min_lr_factor = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::size_t epochs = 5;
  std::size_t batch_max_tokens = 512;
  double validation_fraction = 0.1;
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::kTransIP;
  LossWeights weights;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  /// The loss weights actually used: lambda_leq is 0 in transaug mode.
  LossWeights effective_weights() const;
};

struct OptimizerState {
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;
  std::size_t step = 0;

  static OptimizerState zeros_like(const Parameters& parameters);
};

/// Linear warmup from 0 over warmup_fraction * total_steps, then cosine decay
/// to min_lr_factor * learning_rate at total_steps. Throws
/// std::out_of_range unless 0 <= step <= total_steps.
double cosine_warmup_lr(std::size_t step, std::size_t total_steps, const TrainConfig& config);

/// Rescales `grads` in place when their global L2 norm exceeds `max_norm`.
/// Returns the norm observed before clipping.
double clip_grad_norm(std::vector<Tensor>& grads, double max_norm);

/// One bias-corrected AdamW update with decoupled weight decay, in place.
void adamw_step(Parameters& parameters, const std::vector<Tensor>& grads, OptimizerState& state,
                double lr, const TrainConfig& config);

/// Supervised loss on the batch with every molecule and its force labels
/// rotated by its own rotation; no latent term.
LossBreakdown train_aug_loss(const Batch& batch, const Model& model, const LossWeights& weights,
                             std::span<const Rotation> rotations, const ForwardContext& context = {});
/// Same with one fresh uniform rotation per molecule drawn from `rng`.
LossBreakdown train_aug_step(const Batch& batch, const Model& model, const LossWeights& weights,
                             std::mt19937_64& rng, const ForwardContext& context = {});

struct LogRecord {
  std::size_t step = 0;  // 1-based index of the update
  std::size_t epoch = 0; // 1-based
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_E = 0.0;
  double loss_F = 0.0;
  double loss_leq = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

std::string to_json_line(const LogRecord& record);
LogRecord parse_log_line(const std::string& line);
std::vector<LogRecord> read_training_log(const std::filesystem::path& path);

/// Record indices split by a seed-derived hash: index i is held out when its
/// hash falls in the lowest `fraction` of the range.
struct DataSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};
DataSplit split_dataset(std::size_t count, double fraction, std::uint64_t seed);

/// Batches of every epoch, as index lists into the training records. Each
/// epoch shuffles with its own seed-derived stream.
std::vector<std::vector<std::vector<std::size_t>>> plan_epochs(std::span<const LabeledMolecule> records,
                                                              const TrainConfig& config);

struct Checkpoint;

struct TrainOptions {
  /// Directory for checkpoints, the log and the split; empty keeps everything
  /// in memory.
  std::filesystem::path out_dir;
  /// Continue from this state instead of a fresh initialization.
  const Checkpoint* resume_from = nullptr;
  /// Stop after this many total updates (simulates an interruption).
  std::optional<std::size_t> stop_after_step;
  std::function<void(const LogRecord&)> on_step;
  /// Digest of the dataset, stored in checkpoints.
  std::string dataset_digest;
};

struct TrainResult {
  Model model;
  OptimizerState optimizer;
  std::vector<LogRecord> log;
  DataSplit split;
  std::size_t total_steps = 0;
};

/// Runs the optimization loop. Deterministic for a fixed config: shuffling,
/// dropout and rotations all come from streams keyed by the seed and the
/// epoch or step index. Throws NumericError on a non-finite loss, naming the
/// step and batch.
TrainResult train(std::span<const LabeledMolecule> dataset, const ModelConfig& model_config,
                  const TrainConfig& train_config, const TrainOptions& options = {});

}  // namespace transip
