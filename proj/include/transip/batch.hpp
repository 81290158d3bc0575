#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "transip/molecule.hpp"

namespace transip {

/// Padded batch with one molecule per row.
///
/// Row b holds molecule b in tokens [0, atom_counts[b]); the remaining
/// tokens up to `max_atoms` are padding with zero coordinates and atomic
/// number 0. The pairwise mask is (B, N, N) with 0 where query and key are
/// real atoms of the same molecule and -infinity elsewhere.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t max_atoms = 0;
  std::vector<double> coordinates;          // (B, N, 3)
  std::vector<std::int64_t> atomic_numbers; // (B, N)
  std::vector<double> token_mask;           // (B, N), 1 real / 0 padding
  std::vector<double> attention_mask;       // (B, N, N), 0 or -inf
  std::vector<int> charges;
  std::vector<int> spins;
  std::vector<std::size_t> atom_counts;

  bool has_labels = false;
  std::vector<double> energies;             // (B)
  std::vector<double> forces;               // (B, N, 3)

  std::size_t total_atoms() const;
  /// The same mask over all B*N tokens flattened into one sequence: block
  /// diagonal with one unmasked block per molecule.
  std::vector<double> flat_attention_mask() const;
};

Batch collate(std::span<const Molecule> molecules);
Batch collate(std::span<const LabeledMolecule> records);

/// Greedy packing in input order: a batch takes molecules until the next one
/// would push its real-atom total over `max_tokens`. Returns index lists.
/// Throws std::invalid_argument for a molecule larger than `max_tokens`.
std::vector<std::vector<std::size_t>> plan_batches(std::span<const std::size_t> sizes,
                                                    std::size_t max_tokens);

std::vector<Batch> batch_molecules(std::span<const LabeledMolecule> records, std::size_t max_tokens);

/// Rotates each row's coordinates (and forces, when labelled) by its own
/// rotation. Energies are unchanged.
Batch rotate_batch(const Batch& batch, std::span<const Rotation> rotations);

/// Inverse of collate for labelled batches.
std::vector<LabeledMolecule> unbatch(const Batch& batch);

}  // namespace transip
