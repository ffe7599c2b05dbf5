#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <string>
#include <vector>

#include "xane3/autodiff/ops.hpp"
#include "xane3/autodiff/tensor.hpp"

namespace xane3::so3 {

inline constexpr int kMaxL = 2;

enum class Parity { Even, Odd };

inline int parity_sign(Parity p) { return p == Parity::Even ? 1 : -1; }

struct Irrep {
  std::size_t multiplicity = 0;
  int l = 0;
  Parity parity = Parity::Even;

  std::size_t components() const { return static_cast<std::size_t>(2 * l + 1); }
  std::size_t dim() const { return multiplicity * components(); }
  bool operator==(const Irrep&) const = default;
};

/// Ordered direct sum of irreps with the flat offset of each entry.
class IrrepsLayout {
 public:
  IrrepsLayout() = default;
  explicit IrrepsLayout(std::vector<Irrep> entries);

  /// m0 x 0e + m1 x 1o + m2 x 2e, omitting empty entries.
  static IrrepsLayout hidden(std::size_t m0, std::size_t m1, std::size_t m2);
  static IrrepsLayout scalars(std::size_t m0) { return hidden(m0, 0, 0); }

  const std::vector<Irrep>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  const Irrep& operator[](std::size_t i) const { return entries_[i]; }
  std::size_t offset(std::size_t i) const { return offsets_.at(i); }
  std::size_t dim() const { return dim_; }
  /// Multiplicity of angular order l (0 if absent).
  std::size_t multiplicity(int l) const;
  /// Index of the entry with angular order l, or size() if absent.
  std::size_t find(int l) const;

  std::string str() const;
  bool operator==(const IrrepsLayout& o) const { return entries_ == o.entries_; }

 private:
  std::vector<Irrep> entries_;
  std::vector<std::size_t> offsets_;
  std::size_t dim_ = 0;
};

/// Per-atom features: one tensor of shape (atoms, multiplicity, 2l+1) per
/// layout entry.
struct EquivariantFeature {
  IrrepsLayout layout;
  std::vector<ad::Tensor> blocks;

  std::size_t atoms() const { return blocks.empty() ? 0 : blocks.front().dim(0); }
  const ad::Tensor& block(int l) const;
  bool has(int l) const { return layout.find(l) < layout.size(); }

  /// (atoms x layout.dim()) row-major values following the layout offsets.
  std::vector<double> to_flat() const;
  static EquivariantFeature from_flat(const IrrepsLayout& layout, std::size_t atoms, const std::vector<double>& flat);
};

/// Orthonormal real spherical harmonics of order l at a unit vector,
/// components ordered m = -l..l. For l = 1 the order is (y, z, x).
std::vector<double> real_sph_harm(int l, const Eigen::Vector3d& u);

/// Spherical harmonics of order l for every row of a set of unit vectors,
/// as a tensor of shape (n, 2l+1).
ad::Tensor sph_harm_rows(int l, const std::vector<Eigen::Vector3d>& units);

/// Real Wigner-D matrix: real_sph_harm(l, R u) = D * real_sph_harm(l, u).
Eigen::MatrixXd wigner_d(int l, const Eigen::Matrix3d& rotation);

struct CGTensor {
  int l1 = 0, l2 = 0, l3 = 0;
  /// Flat (2l1+1) x (2l2+1) x (2l3+1) block, index (a, b, c) -> (a*d2 + b)*d3 + c.
  std::vector<double> values;

  std::size_t d1() const { return static_cast<std::size_t>(2 * l1 + 1); }
  std::size_t d2() const { return static_cast<std::size_t>(2 * l2 + 1); }
  std::size_t d3() const { return static_cast<std::size_t>(2 * l3 + 1); }
  double at(std::size_t a, std::size_t b, std::size_t c) const { return values[(a * d2() + b) * d3() + c]; }
  bool is_zero() const;
  ad::Coeff3 sparse(double tol = 1e-14) const;
};

/// Real coupling coefficients, unit Frobenius norm, zero block when the
/// triangle rule fails. Sign fixed so the first entry above 1e-6 in
/// magnitude is positive. Results are cached.
const CGTensor& cg_real(int l1, int l2, int l3);

/// Largest violation of the coupling identity over the given rotations.
double cg_equivariance_residual(const CGTensor& cg, const std::vector<Eigen::Matrix3d>& rotations);

/// Apply D(l, R) to every (multiplicity, l) block, times the parity sign
/// (-1 on odd blocks) when `improper`, i.e. for the operation -R.
EquivariantFeature rotate_feature(const EquivariantFeature& x, const Eigen::Matrix3d& rotation, bool improper);

/// Rotation matrix from a unit quaternion built from three uniforms.
Eigen::Matrix3d random_rotation(double u1, double u2, double u3);

void check_rotation(const Eigen::Matrix3d& r, const char* where);

}  // namespace xane3::so3
