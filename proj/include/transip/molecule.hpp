#pragma once

#include <Eigen/Core>
#include <array>
#include <cstddef>
#include <random>
#include <tuple>
#include <vector>

namespace transip {

using Vec3 = Eigen::Vector3d;

inline constexpr std::size_t kContextLength = 1024;

/// Atomic configuration: positions in Angstrom, atomic numbers, total charge
/// and spin multiplicity.
struct Molecule {
  std::vector<Vec3> positions;
  std::vector<int> atomic_numbers;
  int charge = 0;
  int spin = 1;

  std::size_t size() const { return atomic_numbers.size(); }
};

/// Molecule with reference energy (eV) and forces (eV/Angstrom).
struct LabeledMolecule {
  Molecule molecule;
  double energy = 0.0;
  std::vector<Vec3> forces;

  std::size_t size() const { return molecule.size(); }
};

/// Throws std::invalid_argument when counts, shapes or ranges are violated.
void validate(const Molecule& m);
void validate(const LabeledMolecule& m);

/// Proper rotation stored as an orthonormal 3x3 matrix with det +1.
class Rotation {
 public:
  Rotation() : matrix_(Eigen::Matrix3d::Identity()) {}

  /// Throws std::invalid_argument unless R^T R = I and det R = 1 within `tol`.
  static Rotation from_matrix(const Eigen::Matrix3d& m, double tol = 1e-10);
  /// Rotation by `angle` radians about the unit `axis`.
  static Rotation axis_angle(const Vec3& axis, double angle);
  /// Unit quaternion (w, x, y, z) to matrix; the input is normalized.
  static Rotation from_quaternion(double w, double x, double y, double z);

  const Eigen::Matrix3d& matrix() const { return matrix_; }
  Vec3 apply(const Vec3& v) const { return matrix_ * v; }
  /// this * other: applies `other` first.
  Rotation compose(const Rotation& other) const;
  Rotation inverse() const;
  /// Row-major entries; the input encoding of the group element.
  std::array<double, 9> flattened() const;

 private:
  explicit Rotation(const Eigen::Matrix3d& m) : matrix_(m) {}
  Eigen::Matrix3d matrix_;
};

/// Subtracts the uniform mean position. Computed as (n r_i - sum_j r_j) / n,
/// which is exactly translation invariant whenever the inputs and the
/// translation are exactly representable sums.
Molecule center_coordinates(const Molecule& m);
std::vector<Vec3> centered(const std::vector<Vec3>& positions);

/// Haar-uniform rotation: a normalized 4D standard-normal vector read as a
/// unit quaternion.
Rotation sample_rotation_uniform(std::mt19937_64& rng);

Molecule apply_rotation(const Rotation& g, const Molecule& m);
/// Rotates positions and forces; the energy is unchanged.
LabeledMolecule apply_rotation(const Rotation& g, const LabeledMolecule& m);

struct EquivariancePair {
  Molecule original;
  Rotation rotation;
  Molecule rotated;
};

EquivariancePair make_equivariance_pair(const Molecule& m, std::mt19937_64& rng);

}  // namespace transip
