#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "transip/molecule.hpp"

namespace transip {

struct LjParameters {
  double epsilon = 1.0;  // eV
  double sigma = 1.0;    // Angstrom
};

/// Per-element Lennard-Jones parameters; unlike pairs use Lorentz-Berthelot
/// mixing (arithmetic sigma, geometric epsilon).
class LjTable {
 public:
  LjTable() = default;
  explicit LjTable(std::map<int, LjParameters> entries) : entries_(std::move(entries)) {}

  /// The fixed table used by the synthetic generator.
  static const LjTable& standard();

  bool contains(int z) const { return entries_.count(z) != 0; }
  const LjParameters& at(int z) const;
  LjParameters pair(int zi, int zj) const;
  const std::map<int, LjParameters>& entries() const { return entries_; }

 private:
  std::map<int, LjParameters> entries_;
};

struct EnergyForces {
  double energy = 0.0;
  std::vector<Vec3> forces;
};

/// Pairwise LJ energy sum_{i<j} 4 eps [(s/d)^12 - (s/d)^6] with analytic
/// forces. Throws std::invalid_argument when two atoms are closer than 1e-6 A.
EnergyForces lj_energy_forces(const Molecule& m, double epsilon, double sigma);
EnergyForces lj_energy_forces(const Molecule& m, const LjTable& table);

/// Constant energy shift per (charge, spin) so global molecular properties
/// carry signal in the labels.
double charge_spin_offset(int charge, int spin);

struct GeneratorConfig {
  std::size_t count = 1000;
  std::size_t atoms_min = 3;
  std::size_t atoms_max = 12;
  std::vector<int> element_palette{1, 6, 7, 8};
  std::uint64_t seed = 0;
};

/// Geometric acceptance bounds, in units of the pair sigma.
inline constexpr double kMinPairDistance = 0.8;
inline constexpr double kMaxPairDistance = 4.0;

/// Random LJ clusters with exact labels. Record i is drawn from its own
/// seed-derived stream, so the output does not depend on generation order.
/// Throws std::invalid_argument on bad bounds or palette entries missing from
/// the standard table.
std::vector<LabeledMolecule> generate_lj_dataset(const GeneratorConfig& config);
LabeledMolecule generate_lj_record(const GeneratorConfig& config, std::size_t index);

}  // namespace transip
