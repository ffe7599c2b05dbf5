#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "xane3/autodiff/param_store.hpp"
#include "xane3/graph/graph.hpp"
#include "xane3/model/model.hpp"

namespace xane3::verify {

/// Central-difference step for gradient checks. On a loss of order 10 a
/// 1e-5 step is dominated by rounding and 1e-3 by the cubic truncation term.
inline constexpr double kGradCheckStep = 1e-4;

/// Apply x -> sign * R x + t to positions and lattice rows.
graph::Structure rigid_motion(const graph::Structure& s, const Eigen::Matrix3d& r, bool improper,
                              const Eigen::Vector3d& t);

/// Rattled synthetic cells cycling through rocksalt, spinel and rocksalt slab.
std::vector<graph::Structure> sample_structures(std::size_t count, std::uint64_t seed);

/// Add N(0, scale) noise to every non-basis parameter. Fresh models start
/// with a zero output layer, which would make invariance checks vacuous.
void perturb_parameters(model::Model& m, double scale, std::uint64_t seed);

struct InvarianceReport {
  std::size_t structures = 0;
  std::size_t motions = 0;
  double max_deviation = 0.0;  // infinity norm over all spectra
};

/// Spectrum change under `motions` random rigid motions per structure.
/// Odd-numbered motions include the inversion; translations are up to 5 A
/// per axis.
InvarianceReport spectrum_invariance(const model::Model& m, const std::vector<graph::Structure>& structures,
                                     std::size_t motions, std::uint64_t seed);

/// Largest deviation between the rotated features of every block and the
/// features computed from the moved structure.
double block_equivariance(const model::Model& m, const graph::Structure& s, std::size_t motions, std::uint64_t seed);

/// Largest violation of the coupling identity over every (l1, l2, l3) with
/// all orders at most l_max.
double cg_residual(int l_max, std::size_t rotations, std::uint64_t seed);

/// Composite-loss gradient check on the tiny configuration with one graph.
/// The E0 head input is held at its unperturbed value, which is the
/// function whose gradient the stop-gradient on that head defines.
ad::GradCheckReport tiny_gradcheck(std::uint64_t seed, double step = kGradCheckStep);

struct LocalityReport {
  double distance = 0.0;       // moved atom to absorber, after the move
  double reach = 0.0;          // layers * r_max
  double max_change = 0.0;     // infinity norm of the spectrum change
};

/// Open chain of atoms 2.5 A apart starting at the absorber, long enough for
/// its last atom to sit beyond layers * r_max. Moves that atom and reports
/// the spectrum change.
LocalityReport locality_probe(const model::Model& m, std::uint64_t seed);

}  // namespace xane3::verify
