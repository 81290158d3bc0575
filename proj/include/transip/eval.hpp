#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "transip/model.hpp"
#include "transip/molecule.hpp"

namespace transip {

inline constexpr std::size_t kDefaultProbeRotations = 8;
inline constexpr std::uint64_t kDefaultProbeSeed = 1234;

struct MetricReport {
  double force_mae = 0.0;                          // eV/A
  double force_cosine = 0.0;
  double energy_per_atom_mae = 0.0;                // eV/atom
  double total_energy_mae = 0.0;                   // eV
  double latent_equiv_error = 0.0;
  double energy_rotation_invariance_error = 0.0;   // eV
  double force_rotation_equivariance_error = 0.0;  // eV/A
  std::size_t sample_count = 0;
  std::string category_tag;
};

/// Mean absolute error over all 3|m| components. Throws std::invalid_argument
/// on a shape mismatch.
double force_mae(std::span<const Vec3> predicted, std::span<const Vec3> truth);
/// Per-atom cosine similarity averaged over atoms; rows where either vector
/// has zero norm contribute 0.
double force_cosine(std::span<const Vec3> predicted, std::span<const Vec3> truth);

struct EnergyErrors {
  double per_atom = 0.0;
  double total = 0.0;
};
EnergyErrors energy_metrics(double predicted, double truth, std::size_t atom_count);

/// Pairwise (cascade) summation.
double pairwise_sum(std::span<const double> values);
double pairwise_mean(std::span<const double> values);

/// Energy and forces for each molecule of a list.
using Predictor = std::function<std::vector<MoleculePrediction>(std::span<const Molecule>)>;

/// Evaluation-mode model predictor that packs molecules into batches of at
/// most `batch_max_tokens` atoms.
Predictor model_predictor(const Model& model, std::size_t batch_max_tokens = 512);
/// The exact Lennard-Jones oracle with the standard table.
Predictor lj_predictor();

/// Rotation k of molecule i comes from its own seed-derived stream, so
/// probe values do not depend on how molecules are batched.
Rotation probe_rotation(std::uint64_t seed, std::size_t molecule, std::size_t k);

/// Rotation k for molecule i.
using RotationSource = std::function<Rotation(std::size_t molecule, std::size_t k)>;
RotationSource seeded_rotations(std::uint64_t seed);

/// Mean latent equivariance loss over molecules x rotations, dropout off.
double latent_equivariance_probe(const Model& model, std::span<const Molecule> molecules,
                                 std::size_t rotations_per_molecule = kDefaultProbeRotations,
                                 std::uint64_t seed = kDefaultProbeSeed, std::size_t batch_max_tokens = 512);
double latent_equivariance_probe(const Model& model, std::span<const Molecule> molecules,
                                 std::size_t rotations_per_molecule, const RotationSource& rotations,
                                 std::size_t batch_max_tokens = 512);

struct OutputEquivariance {
  double energy_invariance_error = 0.0;   // mean |E(gm) - E(m)|
  double force_equivariance_error = 0.0;  // mean per-component |F(gm) - R F(m)|
};
OutputEquivariance output_equivariance_probe(const Predictor& predictor, std::span<const Molecule> molecules,
                                             std::size_t rotations_per_molecule = kDefaultProbeRotations,
                                             std::uint64_t seed = kDefaultProbeSeed);
OutputEquivariance output_equivariance_probe(const Predictor& predictor, std::span<const Molecule> molecules,
                                             std::size_t rotations_per_molecule, const RotationSource& rotations);

struct EvalOptions {
  std::size_t rotations = kDefaultProbeRotations;
  std::uint64_t seed = kDefaultProbeSeed;
  std::size_t batch_max_tokens = 512;
};

/// Accuracy metrics against the labels plus both equivariance probes.
MetricReport evaluate(const Model& model, std::span<const LabeledMolecule> records, const std::string& category,
                      const EvalOptions& options = {});

/// Synthetic category tags: "all" plus size classes "small" (at most 6 atoms)
/// and "large" (more than 6). Empty classes are omitted.
using Category = std::pair<std::string, std::vector<LabeledMolecule>>;
std::vector<Category> categorize(std::span<const LabeledMolecule> records);

extern const std::vector<std::string> kMetricCsvColumns;

void write_metric_csv_header(std::ostream& out);
void write_metric_csv_row(std::ostream& out, const std::string& checkpoint, const MetricReport& report);

/// Evaluates every checkpoint on every category and writes one CSV row per
/// (checkpoint, category). Throws DataError for an unreadable checkpoint.
std::vector<MetricReport> compare_models(const std::vector<std::filesystem::path>& checkpoints,
                                         std::span<const Category> categories,
                                         const std::filesystem::path& out_path, const EvalOptions& options = {});

}  // namespace transip
