#pragma once

#include <random>
#include <span>
#include <vector>

#include "transip/batch.hpp"
#include "transip/model.hpp"
#include "transip/tensor.hpp"

namespace transip {

struct LossWeights {
  double lambda_E = 5.0;
  double lambda_F = 15.0;
  double lambda_leq = 5.0;

  /// Throws ConfigError for negative or non-finite weights.
  void validate() const;
};

/// |E_pred - E_true| / atom_count.
double energy_loss(double predicted, double truth, std::size_t atom_count);
/// ||F_pred - F_true||_F^2 / (3 |m|). Throws std::invalid_argument on a shape
/// mismatch.
double force_loss(std::span<const Vec3> predicted, std::span<const Vec3> truth);

// Per-molecule tensor forms over a batch; each returns shape (B).
Tensor energy_loss(const Tensor& predicted, const Batch& batch);
Tensor force_loss(const Tensor& predicted, const Batch& batch);
/// Squared distance between f(g m) and T(g, f(m)), both (B, N, d), divided
/// by |m| d for each molecule.
Tensor latent_equivariance_loss(const Tensor& rotated_embeddings, const Tensor& transformed,
                                const Batch& batch);
/// Runs the backbone on the rotated batch and T on `embeddings`, the
/// backbone output for the unrotated batch. Both branches stay in the graph.
Tensor latent_equivariance_loss(std::span<const Rotation> rotations, const Tensor& embeddings,
                                const Batch& batch, const Model& model,
                                const ForwardContext& context = {});

struct LossBreakdown {
  Tensor total;  // scalar, differentiable
  // Unweighted component values averaged over molecules.
  double energy = 0.0;
  double force = 0.0;
  double latent = 0.0;
};

/// Weighted objective averaged over the molecules of a labelled batch. One
/// rotation per molecule is drawn from `rotation_rng` for the latent term;
/// with lambda_leq = 0 nothing is drawn and the term is skipped.
LossBreakdown total_loss(const Batch& batch, const Model& model, const LossWeights& weights,
                         std::mt19937_64& rotation_rng, const ForwardContext& context = {});

}  // namespace transip
