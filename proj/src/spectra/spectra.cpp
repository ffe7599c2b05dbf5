#include "xane3/spectra/spectra.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "xane3/errors.hpp"

namespace xane3::spectra {

std::vector<double> SpectrumGrid::energies() const {
  std::vector<double> e(n);
  for (std::size_t i = 0; i < n; ++i) e[i] = at(i);
  return e;
}

void SpectrumGrid::validate() const {
  if (n < 3) throw ValueError("spectrum grid needs at least 3 points");
  if (!(e_max > e_min)) throw ValueError("spectrum grid must be increasing");
}

std::vector<double> interpolate(std::span<const double> x, std::span<const double> y, std::span<const double> at) {
  if (x.size() != y.size()) throw ShapeError("interpolate: x and y differ in length");
  if (x.size() < 2) throw ValueError("interpolate: need at least 2 samples");
  std::vector<double> out(at.size());
  for (std::size_t q = 0; q < at.size(); ++q) {
    const double e = at[q];
    if (e < x.front() || e > x.back()) {
      throw ValueError("interpolate: " + std::to_string(e) + " outside [" + std::to_string(x.front()) + ", " +
                       std::to_string(x.back()) + "]");
    }
    auto it = std::upper_bound(x.begin(), x.end(), e);
    std::size_t hi = static_cast<std::size_t>(it - x.begin());
    if (hi == x.size()) hi = x.size() - 1;
    const std::size_t lo = hi - 1;
    const double t = (e - x[lo]) / (x[hi] - x[lo]);
    out[q] = y[lo] + t * (y[hi] - y[lo]);
  }
  return out;
}

namespace {

// Least-squares polynomial of the given degree over samples with x in [lo, hi].
Eigen::VectorXd poly_fit(std::span<const double> x, std::span<const double> y, double lo, double hi, int degree) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < x.size(); ++i)
    if (x[i] >= lo && x[i] <= hi) idx.push_back(i);
  Eigen::MatrixXd a(idx.size(), degree + 1);
  Eigen::VectorXd b(idx.size());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    double p = 1.0;
    for (int d = 0; d <= degree; ++d, p *= x[idx[r]]) a(r, d) = p;
    b(r) = y[idx[r]];
  }
  return a.colPivHouseholderQr().solve(b);
}

double poly_eval(const Eigen::VectorXd& c, double x) {
  double v = 0.0;
  for (Eigen::Index d = c.size() - 1; d >= 0; --d) v = v * x + c(d);
  return v;
}

std::size_t count_in(std::span<const double> x, double lo, double hi) {
  return static_cast<std::size_t>(std::count_if(x.begin(), x.end(), [&](double e) { return e >= lo && e <= hi; }));
}

}  // namespace

std::vector<double> normalize_edge_step(const RawSpectrum& raw, const SpectrumGrid& grid) {
  grid.validate();
  if (raw.energies.size() != raw.mu.size()) throw ShapeError("raw spectrum energies and mu differ in length");
  if (raw.energies.size() < 4) throw ValueError("raw spectrum needs at least 4 points");
  std::vector<double> rel(raw.energies.size());
  for (std::size_t i = 0; i < rel.size(); ++i) {
    if (!std::isfinite(raw.energies[i]) || !std::isfinite(raw.mu[i])) throw ValueError("raw spectrum is not finite");
    rel[i] = raw.energies[i] - raw.e0;
    if (i > 0 && !(rel[i] > rel[i - 1])) throw ValueError("raw energies must be strictly increasing");
  }
  const double tol = 1e-9;
  if (rel.front() > grid.e_min + tol || rel.back() < grid.e_max - tol) {
    throw ValueError("raw spectrum covers [" + std::to_string(rel.front()) + ", " + std::to_string(rel.back()) +
                     "] eV around e0, grid needs [" + std::to_string(grid.e_min) + ", " + std::to_string(grid.e_max) +
                     "]");
  }
  if (count_in(rel, kPreEdgeLo, kPreEdgeHi) < 3) throw ValueError("fewer than 3 raw points in the pre-edge window");
  if (count_in(rel, kPostEdgeLo, kPostEdgeHi) < 3) throw ValueError("fewer than 3 raw points in the post-edge window");

  // Clamp the grid ends onto the raw span so rounding at the boundary is harmless.
  auto e = grid.energies();
  for (auto& v : e) v = std::clamp(v, rel.front(), rel.back());
  const auto mu = interpolate(rel, raw.mu, e);

  const auto pre = poly_fit(e, mu, kPreEdgeLo, kPreEdgeHi, 1);
  const auto post = poly_fit(e, mu, kPostEdgeLo, kPostEdgeHi, 2);
  const double jump = poly_eval(post, 0.0) - poly_eval(pre, 0.0);
  if (!(jump > 1e-6)) throw ValueError("degenerate edge: jump " + std::to_string(jump) + " <= 1e-6");

  std::vector<double> out(grid.n);
  for (std::size_t i = 0; i < grid.n; ++i) out[i] = (mu[i] - poly_eval(pre, e[i])) / jump;
  return out;
}

RawSpectrum read_two_column(const std::string& path, double e0) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  RawSpectrum r;
  r.e0 = e0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ss(line);
    double e, m;
    if (!(ss >> e >> m)) throw IoError(path + ":" + std::to_string(lineno) + ": expected two numbers");
    r.energies.push_back(e);
    r.mu.push_back(m);
  }
  return r;
}

Derivatives finite_derivatives(std::span<const double> y, const SpectrumGrid& grid) {
  grid.validate();
  if (y.size() != grid.n) throw ShapeError("finite_derivatives: spectrum length differs from grid");
  const double h = grid.step();
  Derivatives d;
  d.first.resize(y.size() - 1);
  for (std::size_t i = 0; i + 1 < y.size(); ++i) d.first[i] = (y[i + 1] - y[i]) / h;
  d.second.resize(y.size() - 2);
  // Midpoints of successive forward differences are one step apart on a uniform grid.
  for (std::size_t i = 0; i + 2 < y.size(); ++i) d.second[i] = (d.first[i + 1] - d.first[i]) / h;
  return d;
}

std::pair<ad::Tensor, ad::Tensor> finite_derivatives(const ad::Tensor& y, const SpectrumGrid& grid) {
  grid.validate();
  if (y.rank() != 2 || y.dim(1) != grid.n) {
    throw ShapeError("finite_derivatives: expected (G, " + std::to_string(grid.n) + "), got " +
                     ad::to_string(y.shape()));
  }
  const double inv_h = 1.0 / grid.step();
  const std::size_t n = grid.n;
  auto d1 = ad::scale(ad::sub(ad::narrow(y, 1, 1, n - 1), ad::narrow(y, 1, 0, n - 1)), inv_h);
  auto d2 = ad::scale(ad::sub(ad::narrow(d1, 1, 1, n - 2), ad::narrow(d1, 1, 0, n - 2)), inv_h);
  return {d1, d2};
}

void BasisSpec::validate() const {
  if (per_scale < 2) throw ValueError("basis needs at least 2 centers per scale");
  if (scales.empty()) throw ValueError("basis needs at least one width scale");
  for (double s : scales)
    if (!(s > 0)) throw ValueError("basis width scales must be positive");
  if (background && !(bg_width > 0)) throw ValueError("background width must be positive");
}

std::vector<double> BasisSpec::sigmas(const SpectrumGrid& grid) const {
  validate();
  const double spacing = (grid.e_max - grid.e_min) / static_cast<double>(per_scale - 1);
  std::vector<double> s;
  for (double scale : scales) s.insert(s.end(), per_scale, scale * spacing);
  return s;
}

std::vector<double> BasisSpec::initial_centers(const SpectrumGrid& grid) const {
  validate();
  const double spacing = (grid.e_max - grid.e_min) / static_cast<double>(per_scale - 1);
  std::vector<double> c;
  for (std::size_t s = 0; s < scales.size(); ++s)
    for (std::size_t k = 0; k < per_scale; ++k) c.push_back(grid.e_min + spacing * static_cast<double>(k));
  return c;
}

double softplus_inverse(double y) {
  if (!(y > 0)) throw ValueError("softplus_inverse needs a positive value");
  return y > 30.0 ? y : std::log(std::expm1(y));
}

BasisParams add_basis_params(ad::ParamStore& store, const BasisSpec& spec, const SpectrumGrid& grid) {
  BasisParams p;
  p.centers = store.add(kBasisCenters, {spec.gaussians()}, spec.initial_centers(grid));
  if (spec.background) {
    p.mu_bg = store.add(kBasisMuBg, {1}, {spec.bg_center});
    p.w_bg_raw = store.add(kBasisWBg, {1}, {softplus_inverse(spec.bg_width)});
  }
  return p;
}

BasisParams basis_params(const ad::ParamStore& store, const BasisSpec& spec) {
  BasisParams p;
  p.centers = store.get(kBasisCenters);
  if (spec.background) {
    p.mu_bg = store.get(kBasisMuBg);
    p.w_bg_raw = store.get(kBasisWBg);
  }
  return p;
}

ad::Tensor eval_basis(const BasisParams& params, const BasisSpec& spec, const SpectrumGrid& grid) {
  const std::size_t k = spec.gaussians();
  if (params.centers.shape() != ad::Shape{k}) throw ShapeError("eval_basis: centers shape mismatch");
  const auto sig = spec.sigmas(grid);
  std::vector<double> neg_half_inv_var(k);
  for (std::size_t i = 0; i < k; ++i) neg_half_inv_var[i] = -0.5 / (sig[i] * sig[i]);

  const auto energy = ad::Tensor::from({1, grid.n}, grid.energies());
  const auto diff = ad::sub(energy, ad::reshape(params.centers, {k, 1}));
  const auto gauss = ad::exp(ad::mul(ad::square(diff), ad::Tensor::from({k, 1}, neg_half_inv_var)));
  if (!spec.background) return gauss;

  const auto width = ad::softplus(ad::reshape(params.w_bg_raw, {1, 1}));
  const auto bg = ad::sigmoid(ad::div(ad::sub(energy, ad::reshape(params.mu_bg, {1, 1})), width));
  const ad::Tensor parts[] = {gauss, bg};
  return ad::concat(parts, 0);
}

ad::Tensor reconstruct(const ad::Tensor& coeffs, const ad::Tensor& design) {
  if (coeffs.rank() != 2 || design.rank() != 2 || coeffs.dim(1) != design.dim(0)) {
    throw ShapeError("reconstruct: coeffs " + ad::to_string(coeffs.shape()) + " do not match design " +
                     ad::to_string(design.shape()));
  }
  return ad::matmul(coeffs, design);
}

std::vector<double> fit_coefficients(const ad::Tensor& design, std::span<const double> target) {
  if (design.rank() != 2 || design.dim(1) != target.size()) throw ShapeError("fit_coefficients: shape mismatch");
  const auto rows = static_cast<Eigen::Index>(design.dim(0));
  const auto cols = static_cast<Eigen::Index>(design.dim(1));
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> b(design.data().data(),
                                                                                             rows, cols);
  Eigen::Map<const Eigen::VectorXd> y(target.data(), cols);
  const Eigen::MatrixXd a = b.transpose();
  const Eigen::VectorXd c = a.completeOrthogonalDecomposition().solve(y);
  return {c.data(), c.data() + c.size()};
}

double rms(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s / static_cast<double>(x.size()));
}

}  // namespace xane3::spectra
