#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xane3/autodiff/ops.hpp"
#include "xane3/autodiff/param_store.hpp"

namespace xane3::spectra {

/// Uniform energy grid relative to the edge, in eV.
struct SpectrumGrid {
  double e_min = -30.0;
  double e_max = 100.0;
  std::size_t n = 150;

  double step() const { return (e_max - e_min) / static_cast<double>(n - 1); }
  double at(std::size_t i) const { return e_min + step() * static_cast<double>(i); }
  std::vector<double> energies() const;
  void validate() const;
};

struct RawSpectrum {
  std::vector<double> energies;  // absolute eV, strictly increasing
  std::vector<double> mu;
  double e0 = 0.0;
};

inline constexpr double kPreEdgeLo = -30.0;
inline constexpr double kPreEdgeHi = -10.0;
inline constexpr double kPostEdgeLo = 40.0;
inline constexpr double kPostEdgeHi = 100.0;

/// Piecewise-linear interpolation of (x, y) at `at`. x strictly increasing and
/// covering every query point.
std::vector<double> interpolate(std::span<const double> x, std::span<const double> y, std::span<const double> at);

/// Resample onto the grid, subtract the linear pre-edge fit and divide by the
/// edge jump between the linear pre-edge and quadratic post-edge fits.
std::vector<double> normalize_edge_step(const RawSpectrum& raw, const SpectrumGrid& grid = {});

/// Two-column whitespace separated text (energy, mu). Lines starting with '#'
/// are skipped.
RawSpectrum read_two_column(const std::string& path, double e0);

struct Derivatives {
  std::vector<double> first;   // n-1 forward differences
  std::vector<double> second;  // n-2
};

Derivatives finite_derivatives(std::span<const double> y, const SpectrumGrid& grid = {});

/// Differentiable version along the last axis of a (G, n) tensor.
std::pair<ad::Tensor, ad::Tensor> finite_derivatives(const ad::Tensor& y, const SpectrumGrid& grid = {});

struct BasisSpec {
  std::size_t per_scale = 40;
  std::vector<double> scales{0.1, 0.5, 1.0, 2.0, 4.0};
  bool background = true;
  double bg_center = 0.0;
  double bg_width = 2.0;

  std::size_t gaussians() const { return per_scale * scales.size(); }
  /// Rows of the design matrix: gaussians plus the background row if enabled.
  std::size_t rows() const { return gaussians() + (background ? 1 : 0); }
  /// Fixed widths, scale-major.
  std::vector<double> sigmas(const SpectrumGrid& grid) const;
  /// Initial centers: per_scale uniform points on the grid span, per scale.
  std::vector<double> initial_centers(const SpectrumGrid& grid) const;
  void validate() const;
};

/// Learnable basis parameters as registered in a ParamStore.
struct BasisParams {
  ad::Tensor centers;  // (K)
  ad::Tensor mu_bg;    // (1), undefined without background
  ad::Tensor w_bg_raw; // (1), width = softplus(raw)
};

inline constexpr const char* kBasisCenters = "basis.centers";
inline constexpr const char* kBasisMuBg = "basis.mu_bg";
inline constexpr const char* kBasisWBg = "basis.w_bg_raw";

BasisParams add_basis_params(ad::ParamStore& store, const BasisSpec& spec, const SpectrumGrid& grid);
BasisParams basis_params(const ad::ParamStore& store, const BasisSpec& spec);

/// Inverse of softplus, used to initialise w_bg_raw.
double softplus_inverse(double y);

/// Design matrix of shape (rows, n): Gaussians first, logistic background last.
ad::Tensor eval_basis(const BasisParams& params, const BasisSpec& spec, const SpectrumGrid& grid);

/// coeffs (G, rows) times design (rows, n).
ad::Tensor reconstruct(const ad::Tensor& coeffs, const ad::Tensor& design);

/// Minimum-norm least-squares coefficients for one target on the grid.
std::vector<double> fit_coefficients(const ad::Tensor& design, std::span<const double> target);

double rms(std::span<const double> x);

}  // namespace xane3::spectra
