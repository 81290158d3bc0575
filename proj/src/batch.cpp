#include "transip/batch.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>
#include <string>

namespace transip {

namespace {

constexpr double kMasked = -std::numeric_limits<double>::infinity();

Batch collate_impl(std::span<const Molecule* const> mols) {
  Batch b;
  b.batch_size = mols.size();
  for (const Molecule* m : mols) {
    validate(*m);
    b.max_atoms = std::max(b.max_atoms, m->size());
  }
  const std::size_t B = b.batch_size, N = b.max_atoms;
  b.coordinates.assign(B * N * 3, 0.0);
  b.atomic_numbers.assign(B * N, 0);
  b.token_mask.assign(B * N, 0.0);
  b.attention_mask.assign(B * N * N, kMasked);
  for (std::size_t row = 0; row < B; ++row) {
    const Molecule& m = *mols[row];
    const std::size_t n = m.size();
    for (std::size_t i = 0; i < n; ++i) {
      for (int c = 0; c < 3; ++c) b.coordinates[(row * N + i) * 3 + c] = m.positions[i][c];
      b.atomic_numbers[row * N + i] = m.atomic_numbers[i];
      b.token_mask[row * N + i] = 1.0;
      for (std::size_t j = 0; j < n; ++j) b.attention_mask[(row * N + i) * N + j] = 0.0;
    }
    b.charges.push_back(m.charge);
    b.spins.push_back(m.spin);
    b.atom_counts.push_back(n);
  }
  return b;
}

}  // namespace

std::size_t Batch::total_atoms() const {
  std::size_t total = 0;
  for (auto n : atom_counts) total += n;
  return total;
}

std::vector<double> Batch::flat_attention_mask() const {
  const std::size_t T = batch_size * max_atoms;
  std::vector<double> flat(T * T, kMasked);
  for (std::size_t row = 0; row < batch_size; ++row) {
    for (std::size_t i = 0; i < max_atoms; ++i) {
      for (std::size_t j = 0; j < max_atoms; ++j) {
        const std::size_t a = row * max_atoms + i, c = row * max_atoms + j;
        flat[a * T + c] = attention_mask[(row * max_atoms + i) * max_atoms + j];
      }
    }
  }
  return flat;
}

Batch collate(std::span<const Molecule> molecules) {
  std::vector<const Molecule*> ptrs;
  for (const auto& m : molecules) ptrs.push_back(&m);
  return collate_impl(ptrs);
}

Batch collate(std::span<const LabeledMolecule> records) {
  std::vector<const Molecule*> ptrs;
  for (const auto& r : records) {
    validate(r);
    ptrs.push_back(&r.molecule);
  }
  Batch b = collate_impl(ptrs);
  b.has_labels = true;
  const std::size_t N = b.max_atoms;
  b.forces.assign(b.batch_size * N * 3, 0.0);
  for (std::size_t row = 0; row < records.size(); ++row) {
    b.energies.push_back(records[row].energy);
    for (std::size_t i = 0; i < records[row].size(); ++i) {
      for (int c = 0; c < 3; ++c) b.forces[(row * N + i) * 3 + c] = records[row].forces[i][c];
    }
  }
  return b;
}

std::vector<std::vector<std::size_t>> plan_batches(std::span<const std::size_t> sizes,
                                                    std::size_t max_tokens) {
  std::vector<std::vector<std::size_t>> plan;
  std::size_t used = 0;
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    if (sizes[i] > max_tokens) {
      throw std::invalid_argument("molecule " + std::to_string(i) + " with " +
                                  std::to_string(sizes[i]) + " atoms exceeds the token budget " +
                                  std::to_string(max_tokens));
    }
    if (plan.empty() || used + sizes[i] > max_tokens) {
      plan.emplace_back();
      used = 0;
    }
    plan.back().push_back(i);
    used += sizes[i];
  }
  return plan;
}

std::vector<Batch> batch_molecules(std::span<const LabeledMolecule> records, std::size_t max_tokens) {
  std::vector<std::size_t> sizes;
  for (const auto& r : records) sizes.push_back(r.size());
  std::vector<Batch> batches;
  for (const auto& group : plan_batches(sizes, max_tokens)) {
    std::vector<LabeledMolecule> members;
    for (auto i : group) members.push_back(records[i]);
    batches.push_back(collate(members));
  }
  return batches;
}

Batch rotate_batch(const Batch& batch, std::span<const Rotation> rotations) {
  if (rotations.size() != batch.batch_size) {
    throw std::invalid_argument("rotate_batch needs one rotation per molecule (" +
                                std::to_string(batch.batch_size) + "), got " +
                                std::to_string(rotations.size()));
  }
  Batch out = batch;
  const std::size_t N = batch.max_atoms;
  auto rotate_rows = [&](std::vector<double>& data, std::size_t row) {
    for (std::size_t i = 0; i < batch.atom_counts[row]; ++i) {
      double* p = data.data() + (row * N + i) * 3;
      const Vec3 v = rotations[row].apply(Vec3(p[0], p[1], p[2]));
      for (int c = 0; c < 3; ++c) p[c] = v[c];
    }
  };
  for (std::size_t row = 0; row < batch.batch_size; ++row) {
    rotate_rows(out.coordinates, row);
    if (out.has_labels) rotate_rows(out.forces, row);
  }
  return out;
}

std::vector<LabeledMolecule> unbatch(const Batch& batch) {
  if (!batch.has_labels) throw std::invalid_argument("unbatch needs a labelled batch");
  const std::size_t N = batch.max_atoms;
  std::vector<LabeledMolecule> out;
  for (std::size_t row = 0; row < batch.batch_size; ++row) {
    LabeledMolecule r;
    const std::size_t n = batch.atom_counts[row];
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t t = row * N + i;
      r.molecule.positions.emplace_back(batch.coordinates[t * 3], batch.coordinates[t * 3 + 1],
                                        batch.coordinates[t * 3 + 2]);
      r.molecule.atomic_numbers.push_back(static_cast<int>(batch.atomic_numbers[t]));
      r.forces.emplace_back(batch.forces[t * 3], batch.forces[t * 3 + 1], batch.forces[t * 3 + 2]);
    }
    r.molecule.charge = batch.charges[row];
    r.molecule.spin = batch.spins[row];
    r.energy = batch.energies[row];
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace transip
