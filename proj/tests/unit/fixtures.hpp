#pragma once

#include <Eigen/Dense>
#include <random>

#include "xane3/graph/graph.hpp"
#include "xane3/so3/so3.hpp"

namespace xane3::testing {

/// Periodic Fe-O cell with `atoms` randomly placed atoms kept at least
/// `min_sep` apart; atom 0 is an Fe absorber.
inline graph::Structure random_structure(std::mt19937_64& rng, std::size_t atoms = 6, double edge = 5.5,
                                         double min_sep = 1.6) {
  std::uniform_real_distribution<double> u(0, 1);
  graph::Structure s;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) s.lattice(r, c) = (r == c ? edge : 0.0) + 0.4 * (u(rng) - 0.5);
  s.pbc = {true, true, true};
  while (s.positions.size() < atoms) {
    const Eigen::Vector3d p = s.lattice.transpose() * Eigen::Vector3d(u(rng), u(rng), u(rng));
    bool ok = true;
    for (const auto& q : s.positions) ok = ok && (p - q).norm() > min_sep;
    if (!ok) continue;
    s.positions.push_back(p);
    s.numbers.push_back(s.positions.size() % 3 == 1 ? 26 : 8);
  }
  s.absorber_sites = {0};
  return s;
}

inline Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  const double a = u(rng), b = u(rng), c = u(rng);
  return so3::random_rotation(a, b, c);
}

/// Apply x -> sign * R x + t to positions and lattice rows.
inline graph::Structure rigid_motion(const graph::Structure& s, const Eigen::Matrix3d& r, bool improper,
                                     const Eigen::Vector3d& t) {
  const Eigen::Matrix3d op = improper ? Eigen::Matrix3d(-r) : r;
  graph::Structure out = s;
  for (auto& p : out.positions) p = op * p + t;
  out.lattice = s.lattice * op.transpose();
  return out;
}

}  // namespace xane3::testing
