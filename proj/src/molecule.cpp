#include "transip/molecule.hpp"

#include <Eigen/Geometry>
#include <cmath>
#include <stdexcept>
#include <string>

namespace transip {

void validate(const Molecule& m) {
  const std::size_t n = m.size();
  if (n == 0) throw std::invalid_argument("molecule has no atoms");
  if (n > kContextLength) {
    throw std::invalid_argument("molecule with " + std::to_string(n) +
                                " atoms exceeds the context length " +
                                std::to_string(kContextLength));
  }
  if (m.positions.size() != n) {
    throw std::invalid_argument("molecule has " + std::to_string(n) + " atomic numbers but " +
                                std::to_string(m.positions.size()) + " positions");
  }
  for (int z : m.atomic_numbers) {
    if (z <= 0) throw std::invalid_argument("atomic numbers must be positive");
  }
  if (m.spin < 1) throw std::invalid_argument("spin multiplicity must be >= 1");
  for (const auto& p : m.positions) {
    if (!p.allFinite()) throw std::invalid_argument("non-finite coordinate");
  }
}

void validate(const LabeledMolecule& m) {
  validate(m.molecule);
  if (m.forces.size() != m.size()) {
    throw std::invalid_argument("force rows (" + std::to_string(m.forces.size()) +
                                ") do not match atom count (" + std::to_string(m.size()) + ")");
  }
  if (!std::isfinite(m.energy)) throw std::invalid_argument("non-finite energy label");
}

Rotation Rotation::from_matrix(const Eigen::Matrix3d& m, double tol) {
  const double ortho = (m.transpose() * m - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  const double det = m.determinant();
  if (!(ortho <= tol) || !(std::abs(det - 1.0) <= tol)) {
    throw std::invalid_argument("matrix is not a proper rotation (orthogonality error " +
                                std::to_string(ortho) + ", det " + std::to_string(det) + ")");
  }
  return Rotation(m);
}

Rotation Rotation::axis_angle(const Vec3& axis, double angle) {
  return Rotation(Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix());
}

Rotation Rotation::from_quaternion(double w, double x, double y, double z) {
  return Rotation(Eigen::Quaterniond(w, x, y, z).normalized().toRotationMatrix());
}

Rotation Rotation::compose(const Rotation& other) const { return Rotation(matrix_ * other.matrix_); }

Rotation Rotation::inverse() const { return Rotation(matrix_.transpose()); }

std::array<double, 9> Rotation::flattened() const {
  std::array<double, 9> out{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) out[static_cast<std::size_t>(3 * i + j)] = matrix_(i, j);
  }
  return out;
}

std::vector<Vec3> centered(const std::vector<Vec3>& positions) {
  if (positions.empty()) throw std::invalid_argument("cannot center an empty molecule");
  Vec3 total = Vec3::Zero();
  for (const auto& p : positions) total += p;
  const double n = static_cast<double>(positions.size());
  std::vector<Vec3> out;
  out.reserve(positions.size());
  for (const auto& p : positions) out.emplace_back((n * p - total) / n);
  return out;
}

Molecule center_coordinates(const Molecule& m) {
  Molecule out = m;
  out.positions = centered(m.positions);
  return out;
}

Rotation sample_rotation_uniform(std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  double w, x, y, z, norm2;
  do {
    w = normal(rng);
    x = normal(rng);
    y = normal(rng);
    z = normal(rng);
    norm2 = w * w + x * x + y * y + z * z;
  } while (norm2 < 1e-12);
  return Rotation::from_quaternion(w, x, y, z);
}

Molecule apply_rotation(const Rotation& g, const Molecule& m) {
  Molecule out = m;
  for (auto& p : out.positions) p = g.apply(p);
  return out;
}

LabeledMolecule apply_rotation(const Rotation& g, const LabeledMolecule& m) {
  LabeledMolecule out = m;
  out.molecule = apply_rotation(g, m.molecule);
  for (auto& f : out.forces) f = g.apply(f);
  return out;
}

EquivariancePair make_equivariance_pair(const Molecule& m, std::mt19937_64& rng) {
  Rotation g = sample_rotation_uniform(rng);
  return {m, g, apply_rotation(g, m)};
}

}  // namespace transip
