#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "transip/batch.hpp"
#include "transip/molecule.hpp"
#include "transip/tensor.hpp"

namespace transip {

inline constexpr int kMaxAtomicNumber = 118;

struct ModelConfig {
  std::size_t hidden_dim = 384;
  std::size_t num_layers = 8;
  std::size_t num_heads = 6;
  std::size_t context_length = kContextLength;
  double projection_dropout = 0.01;
  double attention_dropout = 0.0;
  std::size_t feedforward_multiplier = 4;
  int charge_vocab_range = 10;  // charges in [-range, range]
  int spin_vocab_range = 10;    // multiplicities in [1, range]
  std::size_t ttau_layers = 2;
  std::size_t ttau_hidden_multiplier = 2;

  std::size_t head_dim() const { return hidden_dim / num_heads; }
  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Named learnable tensors in a fixed construction order.
class Parameters {
 public:
  void add(std::string path, Tensor value);

  std::size_t size() const { return tensors_.size(); }
  bool contains(std::string_view path) const;
  const Tensor& operator[](std::string_view path) const;
  std::size_t index_of(std::string_view path) const;

  const std::vector<std::string>& paths() const { return paths_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  /// Replaces the value at `index`; the shape must match.
  void assign(std::size_t index, Tensor value);
  /// Total number of scalars.
  std::size_t count() const;

 private:
  std::vector<std::string> paths_;
  std::vector<Tensor> tensors_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Every parameter of `config` with its shape, zero filled.
Parameters parameter_layout(const ModelConfig& config);
/// Truncated normal (std 0.02) weights, normal (std 0.02) embedding tables,
/// zero biases and unit layer-norm gains. Each tensor draws from its own
/// seed-derived stream.
Parameters init_parameters(const ModelConfig& config, std::uint64_t seed);

class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  /// Throws ConfigError when a tensor is missing or its shape disagrees with
  /// the config, quoting both shapes.
  Model(ModelConfig config, Parameters parameters);

  const ModelConfig& config() const { return config_; }
  const Parameters& parameters() const { return parameters_; }
  Parameters& parameters() { return parameters_; }
  const Tensor& operator[](std::string_view path) const { return parameters_[path]; }

 private:
  ModelConfig config_;
  Parameters parameters_;
};

/// Dropout randomness for one forward pass; null disables dropout.
struct ForwardContext {
  std::mt19937_64* dropout_rng = nullptr;
};

Tensor token_mask_tensor(const Batch& batch);      // (B, N, 1)
Tensor attention_mask_tensor(const Batch& batch);  // (B, N, N)
/// Batch coordinates as a fresh leaf tensor (B, N, 3).
Tensor coordinate_tensor(const Batch& batch);

/// Atom tokens (B, N, d): element embedding and coordinate embedding, d/2
/// each, concatenated. Padded tokens are zero. `coordinates` must already be
/// centered.
Tensor embed_tokens(const Batch& batch, const Tensor& coordinates, const Model& model);

/// Charge and spin embedding sum, shape (d). Throws std::invalid_argument
/// outside the vocabulary.
Tensor global_bias(int charge, int spin, const Model& model);
/// One bias row per molecule, shape (B, 1, d).
Tensor global_bias(const Batch& batch, const Model& model);

/// Rotary encoding of a single vector at `position`.
std::vector<double> rope_apply(std::span<const double> x, std::size_t position,
                               double base = 10000.0);

/// One pre-norm transformer block on (B, N, d) tokens.
Tensor attention_layer(const Tensor& tokens, const Tensor& mask, const Model& model,
                       std::size_t layer, const ForwardContext& context = {});

/// Backbone f: per-atom embeddings (B, N, d), padded rows zero. The
/// coordinates are centered per molecule inside the graph.
Tensor forward_embed(const Batch& batch, const Tensor& coordinates, const Model& model,
                     const ForwardContext& context = {});

/// Energy head on the mean over real atoms; returns (B).
Tensor aggregate_energy(const Tensor& embeddings, const Batch& batch, const Model& model);

/// Row-wise latent transformation T(g, H): each atom row is mapped from
/// concat(flattened rotation, h) to a new d-vector. `rotations` holds one
/// rotation per molecule. Output has padded rows zero.
Tensor transform_latent(std::span<const Rotation> rotations, const Tensor& embeddings,
                        const Batch& batch, const Model& model);

struct Prediction {
  Tensor coordinates;  // leaf the forces are taken against
  Tensor embeddings;   // (B, N, d)
  Tensor energy;       // (B)
  Tensor forces;       // (B, N, 3), -dE/dr
};

/// Energy and conservative forces. With `create_graph` the forces stay
/// differentiable with respect to the parameters.
Prediction predict(const Batch& batch, const Model& model, bool create_graph,
                   const ForwardContext& context = {});

/// Embeddings of a single molecule as an (n, d) row-major array.
std::vector<double> embedding_rows(const Tensor& embeddings, const Batch& batch, std::size_t row);

struct MoleculePrediction {
  double energy = 0.0;
  std::vector<Vec3> forces;
};

/// Evaluation-mode predictions for each molecule of the batch.
std::vector<MoleculePrediction> predict_molecules(const Batch& batch, const Model& model);

}  // namespace transip
