#include "transip/lj_oracle.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "transip/random.hpp"

namespace transip {

namespace {

constexpr double kCoincident = 1e-6;

// Placement and relaxation of generated clusters.
constexpr double kPlaceMin = 1.0;      // new atom distance from its anchor, in pair sigma
constexpr double kPlaceMax = 1.5;
constexpr double kPlaceClash = 0.95;   // reject placements closer than this to any atom
constexpr int kPlaceTries = 200;
constexpr int kClusterTries = 1000;
constexpr int kRelaxSteps = 25;
constexpr double kRelaxRate = 0.02;    // Angstrom^2 / eV
constexpr double kRelaxMaxStep = 0.05; // Angstrom

void accumulate_pair(const Vec3& ri, const Vec3& rj, const LjParameters& p, double& energy,
                     Vec3& fi, Vec3& fj) {
  const Vec3 rij = ri - rj;
  const double d2 = rij.squaredNorm();
  if (d2 < kCoincident * kCoincident) {
    throw std::invalid_argument("coincident atoms (distance " + std::to_string(std::sqrt(d2)) +
                                " A)");
  }
  const double s2 = p.sigma * p.sigma / d2;
  const double s6 = s2 * s2 * s2;
  const double s12 = s6 * s6;
  energy += 4.0 * p.epsilon * (s12 - s6);
  const Vec3 f = (24.0 * p.epsilon * (2.0 * s12 - s6) / d2) * rij;
  fi += f;
  fj -= f;
}

template <class PairFn>
EnergyForces pairwise(const Molecule& m, PairFn params) {
  validate(m);
  EnergyForces out;
  out.forces.assign(m.size(), Vec3::Zero());
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (std::size_t j = i + 1; j < m.size(); ++j) {
      accumulate_pair(m.positions[i], m.positions[j], params(i, j), out.energy, out.forces[i],
                      out.forces[j]);
    }
  }
  return out;
}

bool within_bounds(const Molecule& m, const LjTable& table) {
  for (std::size_t i = 0; i < m.size(); ++i) {
    for (std::size_t j = i + 1; j < m.size(); ++j) {
      const double sigma = table.pair(m.atomic_numbers[i], m.atomic_numbers[j]).sigma;
      const double d = (m.positions[i] - m.positions[j]).norm();
      if (d < kMinPairDistance * sigma || d > kMaxPairDistance * sigma) return false;
    }
  }
  return true;
}

Vec3 random_direction(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec3 v;
  do {
    v = Vec3(normal(rng), normal(rng), normal(rng));
  } while (v.squaredNorm() < 1e-12);
  return v.normalized();
}

// Grows a cluster atom by atom around random anchors; false when a placement
// could not be found.
bool grow_cluster(Molecule& m, const LjTable& table, std::mt19937_64& rng) {
  const std::size_t n = m.size();
  m.positions.assign(n, Vec3::Zero());
  std::uniform_real_distribution<double> radius(kPlaceMin, kPlaceMax);
  for (std::size_t i = 1; i < n; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < kPlaceTries && !placed; ++attempt) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      const std::size_t anchor = pick(rng);
      const double sigma = table.pair(m.atomic_numbers[anchor], m.atomic_numbers[i]).sigma;
      const Vec3 candidate = m.positions[anchor] + radius(rng) * sigma * random_direction(rng);
      placed = true;
      for (std::size_t k = 0; k < i && placed; ++k) {
        const double s = table.pair(m.atomic_numbers[k], m.atomic_numbers[i]).sigma;
        const double d = (candidate - m.positions[k]).norm();
        placed = d >= kPlaceClash * s && d <= kMaxPairDistance * s;
      }
      if (placed) m.positions[i] = candidate;
    }
    if (!placed) return false;
  }
  return true;
}

void relax(Molecule& m, const LjTable& table) {
  for (int step = 0; step < kRelaxSteps; ++step) {
    const auto ef = lj_energy_forces(m, table);
    for (std::size_t i = 0; i < m.size(); ++i) {
      Vec3 delta = kRelaxRate * ef.forces[i];
      const double len = delta.norm();
      if (len > kRelaxMaxStep) delta *= kRelaxMaxStep / len;
      m.positions[i] += delta;
    }
  }
}

}  // namespace

const LjTable& LjTable::standard() {
  static const LjTable table({
      {1, {0.05, 1.00}},
      {6, {0.12, 1.25}},
      {7, {0.10, 1.20}},
      {8, {0.14, 1.15}},
      {9, {0.08, 1.10}},
      {15, {0.15, 1.45}},
      {16, {0.16, 1.40}},
      {17, {0.13, 1.35}},
  });
  return table;
}

const LjParameters& LjTable::at(int z) const {
  auto it = entries_.find(z);
  if (it == entries_.end()) {
    throw std::invalid_argument("no Lennard-Jones parameters for atomic number " + std::to_string(z));
  }
  return it->second;
}

LjParameters LjTable::pair(int zi, int zj) const {
  const auto& a = at(zi);
  const auto& b = at(zj);
  return {std::sqrt(a.epsilon * b.epsilon), 0.5 * (a.sigma + b.sigma)};
}

EnergyForces lj_energy_forces(const Molecule& m, double epsilon, double sigma) {
  const LjParameters p{epsilon, sigma};
  return pairwise(m, [&](std::size_t, std::size_t) { return p; });
}

EnergyForces lj_energy_forces(const Molecule& m, const LjTable& table) {
  return pairwise(m, [&](std::size_t i, std::size_t j) {
    return table.pair(m.atomic_numbers[i], m.atomic_numbers[j]);
  });
}

double charge_spin_offset(int charge, int spin) { return 0.7 * charge + 0.4 * (spin - 1); }

LabeledMolecule generate_lj_record(const GeneratorConfig& config, std::size_t index) {
  const LjTable& table = LjTable::standard();
  auto rng = make_rng(config.seed, Stream::kRecord, index);
  std::uniform_int_distribution<std::size_t> atoms(config.atoms_min, config.atoms_max);
  std::uniform_int_distribution<std::size_t> element(0, config.element_palette.size() - 1);
  std::uniform_int_distribution<int> charge(-1, 1);
  std::uniform_int_distribution<int> spin(1, 2);

  Molecule m;
  const std::size_t n = atoms(rng);
  m.charge = charge(rng);
  m.spin = spin(rng);
  for (int attempt = 0; attempt < kClusterTries; ++attempt) {
    m.atomic_numbers.clear();
    for (std::size_t i = 0; i < n; ++i) m.atomic_numbers.push_back(config.element_palette[element(rng)]);
    if (!grow_cluster(m, table, rng)) continue;
    relax(m, table);
    if (!within_bounds(m, table)) continue;
    m = center_coordinates(m);
    LabeledMolecule record;
    auto ef = lj_energy_forces(m, table);
    record.molecule = std::move(m);
    record.energy = ef.energy + charge_spin_offset(record.molecule.charge, record.molecule.spin);
    record.forces = std::move(ef.forces);
    return record;
  }
  throw std::runtime_error("could not generate a cluster within bounds for record " +
                           std::to_string(index));
}

std::vector<LabeledMolecule> generate_lj_dataset(const GeneratorConfig& config) {
  if (config.atoms_min < 2) throw std::invalid_argument("atoms_min must be at least 2");
  if (config.atoms_max < config.atoms_min) throw std::invalid_argument("atoms_max < atoms_min");
  if (config.atoms_max > kContextLength) throw std::invalid_argument("atoms_max exceeds context length");
  if (config.element_palette.empty()) throw std::invalid_argument("empty element palette");
  for (int z : config.element_palette) LjTable::standard().at(z);
  std::vector<LabeledMolecule> out;
  out.reserve(config.count);
  for (std::size_t i = 0; i < config.count; ++i) out.push_back(generate_lj_record(config, i));
  return out;
}

}  // namespace transip
