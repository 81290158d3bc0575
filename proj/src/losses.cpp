#include "transip/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "transip/errors.hpp"
#include "transip/ops.hpp"

namespace transip {

using namespace transip::ops;

namespace {

Tensor counts(const Batch& batch, double factor) {
  std::vector<double> v;
  for (auto n : batch.atom_counts) v.push_back(factor * static_cast<double>(n));
  return Tensor({batch.batch_size}, std::move(v));
}

// Sum over every axis but the first: (B, ...) -> (B).
Tensor per_molecule_sum(const Tensor& x) {
  Tensor out = x;
  while (out.rank() > 1) out = sum(out, -1);
  return out;
}

void require_labels(const Batch& batch) {
  if (!batch.has_labels) throw std::invalid_argument("loss needs a labelled batch");
}

}  // namespace

void LossWeights::validate() const {
  for (double w : {lambda_E, lambda_F, lambda_leq}) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw ConfigError("loss weights must be finite and non-negative");
    }
  }
}

double energy_loss(double predicted, double truth, std::size_t atom_count) {
  if (atom_count == 0) throw std::invalid_argument("energy_loss needs at least one atom");
  return std::abs(predicted - truth) / static_cast<double>(atom_count);
}

double force_loss(std::span<const Vec3> predicted, std::span<const Vec3> truth) {
  if (predicted.size() != truth.size() || predicted.empty()) {
    throw std::invalid_argument("force arrays differ in shape: " + std::to_string(predicted.size()) +
                                "x3 vs " + std::to_string(truth.size()) + "x3");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) total += (predicted[i] - truth[i]).squaredNorm();
  return total / (3.0 * static_cast<double>(predicted.size()));
}

Tensor energy_loss(const Tensor& predicted, const Batch& batch) {
  require_labels(batch);
  Tensor truth({batch.batch_size}, batch.energies);
  return div(abs(sub(predicted, truth)), counts(batch, 1.0));
}

Tensor force_loss(const Tensor& predicted, const Batch& batch) {
  require_labels(batch);
  const Shape expected{batch.batch_size, batch.max_atoms, 3};
  if (predicted.shape() != expected) {
    throw std::invalid_argument("force prediction " + shape_str(predicted.shape()) +
                                " does not match labels " + shape_str(expected));
  }
  Tensor truth(expected, batch.forces);
  return div(per_molecule_sum(square(sub(predicted, truth))), counts(batch, 3.0));
}

Tensor latent_equivariance_loss(const Tensor& rotated_embeddings, const Tensor& transformed,
                                const Batch& batch) {
  if (rotated_embeddings.shape() != transformed.shape()) {
    throw std::invalid_argument("latent shapes differ: " + shape_str(rotated_embeddings.shape()) +
                                " vs " + shape_str(transformed.shape()));
  }
  const double d = static_cast<double>(transformed.dim(-1));
  Tensor diff = mul(sub(rotated_embeddings, transformed), token_mask_tensor(batch));
  return div(per_molecule_sum(square(diff)), counts(batch, d));
}

Tensor latent_equivariance_loss(std::span<const Rotation> rotations, const Tensor& embeddings,
                                const Batch& batch, const Model& model,
                                const ForwardContext& context) {
  const Batch rotated = rotate_batch(batch, rotations);
  Tensor rotated_embeddings = forward_embed(rotated, coordinate_tensor(rotated), model, context);
  Tensor transformed = transform_latent(rotations, embeddings, batch, model);
  return latent_equivariance_loss(rotated_embeddings, transformed, batch);
}

LossBreakdown total_loss(const Batch& batch, const Model& model, const LossWeights& weights,
                         std::mt19937_64& rotation_rng, const ForwardContext& context) {
  require_labels(batch);
  weights.validate();
  GradModeGuard recording(true);
  const Prediction p = predict(batch, model, weights.lambda_F > 0.0, context);
  Tensor le = energy_loss(p.energy, batch);
  Tensor lf = force_loss(p.forces, batch);
  Tensor per_molecule = add(scale(le, weights.lambda_E), scale(lf, weights.lambda_F));

  LossBreakdown out;
  if (weights.lambda_leq > 0.0) {
    std::vector<Rotation> rotations;
    for (std::size_t b = 0; b < batch.batch_size; ++b) rotations.push_back(sample_rotation_uniform(rotation_rng));
    Tensor ll = latent_equivariance_loss(rotations, p.embeddings, batch, model, context);
    per_molecule = add(per_molecule, scale(ll, weights.lambda_leq));
    out.latent = mean_all(ll).item();
  }
  out.total = mean_all(per_molecule);
  out.energy = mean_all(le).item();
  out.force = mean_all(lf).item();
  return out;
}

}  // namespace transip
