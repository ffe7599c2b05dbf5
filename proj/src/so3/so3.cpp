#include "xane3/so3/so3.hpp"

#include <array>
#include <cmath>
#include <mutex>
#include <random>
#include <sstream>

#include "xane3/errors.hpp"

namespace xane3::so3 {

namespace {

void check_l(int l, const char* where) {
  if (l < 0 || l > kMaxL) throw ValueError(std::string(where) + ": angular order " + std::to_string(l) + " not in 0..2");
}

// Well-spread directions on the sphere used to identify D(l, R).
const std::vector<Eigen::Vector3d>& probe_directions() {
  static const std::vector<Eigen::Vector3d> dirs = [] {
    std::vector<Eigen::Vector3d> d;
    const int n = 24;
    const double golden = M_PI * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < n; ++i) {
      const double z = 1.0 - (2.0 * i + 1.0) / n;
      const double r = std::sqrt(1.0 - z * z);
      d.emplace_back(r * std::cos(golden * i), r * std::sin(golden * i), z);
    }
    return d;
  }();
  return dirs;
}

CGTensor solve_cg(int l1, int l2, int l3) {
  CGTensor cg{l1, l2, l3, {}};
  const std::size_t d1 = cg.d1(), d2 = cg.d2(), d3 = cg.d3(), n = d1 * d2 * d3;
  cg.values.assign(n, 0.0);
  if (l3 < std::abs(l1 - l2) || l3 > l1 + l2) return cg;

  // C is the common fixed vector of D1 (x) D2 (x) D3 over a generating set
  // of rotations.
  std::mt19937_64 rng(20240917);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int n_rot = 4;
  Eigen::MatrixXd stacked(n_rot * n, n);
  for (int r = 0; r < n_rot; ++r) {
    const double a = u(rng), b = u(rng), c = u(rng);
    const Eigen::Matrix3d rot = random_rotation(a, b, c);
    const Eigen::MatrixXd D1 = wigner_d(l1, rot), D2 = wigner_d(l2, rot), D3 = wigner_d(l3, rot);
    Eigen::MatrixXd M(n, n);
    for (std::size_t a1 = 0; a1 < d1; ++a1)
      for (std::size_t b1 = 0; b1 < d2; ++b1)
        for (std::size_t c1 = 0; c1 < d3; ++c1)
          for (std::size_t a2 = 0; a2 < d1; ++a2)
            for (std::size_t b2 = 0; b2 < d2; ++b2)
              for (std::size_t c2 = 0; c2 < d3; ++c2)
                M((a1 * d2 + b1) * d3 + c1, (a2 * d2 + b2) * d3 + c2) = D1(a1, a2) * D2(b1, b2) * D3(c1, c2);
    stacked.block(r * n, 0, n, n) = M - Eigen::MatrixXd::Identity(n, n);
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(stacked, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  if (sv(n - 1) > 1e-8 || (n > 1 && sv(n - 2) < 1e-3)) {
    throw ValueError("cg_real: coupling (" + std::to_string(l1) + "," + std::to_string(l2) + "," + std::to_string(l3) +
                     ") has no unique solution");
  }
  Eigen::VectorXd c = svd.matrixV().col(n - 1);
  c.normalize();
  for (std::size_t i = 0; i < n; ++i) {
    if (std::abs(c(i)) > 1e-6) {
      if (c(i) < 0) c = -c;
      break;
    }
  }
  for (std::size_t i = 0; i < n; ++i) cg.values[i] = std::abs(c(i)) < 1e-15 ? 0.0 : c(i);
  return cg;
}

}  // namespace

IrrepsLayout::IrrepsLayout(std::vector<Irrep> entries) : entries_(std::move(entries)) {
  for (const auto& e : entries_) {
    check_l(e.l, "IrrepsLayout");
    offsets_.push_back(dim_);
    dim_ += e.dim();
  }
}

IrrepsLayout IrrepsLayout::hidden(std::size_t m0, std::size_t m1, std::size_t m2) {
  std::vector<Irrep> e;
  if (m0) e.push_back({m0, 0, Parity::Even});
  if (m1) e.push_back({m1, 1, Parity::Odd});
  if (m2) e.push_back({m2, 2, Parity::Even});
  return IrrepsLayout(std::move(e));
}

std::size_t IrrepsLayout::multiplicity(int l) const {
  const auto i = find(l);
  return i < size() ? entries_[i].multiplicity : 0;
}

std::size_t IrrepsLayout::find(int l) const {
  for (std::size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].l == l) return i;
  return entries_.size();
}

std::string IrrepsLayout::str() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (i) os << " + ";
    os << entries_[i].multiplicity << "x" << entries_[i].l << (entries_[i].parity == Parity::Even ? 'e' : 'o');
  }
  return os.str();
}

const ad::Tensor& EquivariantFeature::block(int l) const {
  const auto i = layout.find(l);
  if (i >= layout.size()) throw ShapeError("feature " + layout.str() + " has no l=" + std::to_string(l) + " block");
  return blocks[i];
}

std::vector<double> EquivariantFeature::to_flat() const {
  const std::size_t n = atoms();
  std::vector<double> flat(n * layout.dim());
  for (std::size_t k = 0; k < layout.size(); ++k) {
    const auto d = layout[k].dim();
    const auto v = blocks[k].data();
    for (std::size_t a = 0; a < n; ++a)
      for (std::size_t j = 0; j < d; ++j) flat[a * layout.dim() + layout.offset(k) + j] = v[a * d + j];
  }
  return flat;
}

EquivariantFeature EquivariantFeature::from_flat(const IrrepsLayout& layout, std::size_t atoms,
                                                 const std::vector<double>& flat) {
  if (flat.size() != atoms * layout.dim()) throw ShapeError("from_flat: size does not match layout " + layout.str());
  EquivariantFeature f{layout, {}};
  for (std::size_t k = 0; k < layout.size(); ++k) {
    const auto d = layout[k].dim();
    std::vector<double> v(atoms * d);
    for (std::size_t a = 0; a < atoms; ++a)
      for (std::size_t j = 0; j < d; ++j) v[a * d + j] = flat[a * layout.dim() + layout.offset(k) + j];
    f.blocks.push_back(ad::Tensor::from({atoms, layout[k].multiplicity, layout[k].components()}, std::move(v)));
  }
  return f;
}

std::vector<double> real_sph_harm(int l, const Eigen::Vector3d& u) {
  check_l(l, "real_sph_harm");
  if (std::abs(u.norm() - 1.0) > 1e-9) throw ValueError("real_sph_harm: input is not a unit vector");
  const double x = u.x(), y = u.y(), z = u.z();
  switch (l) {
    case 0:
      return {0.5 / std::sqrt(M_PI)};
    case 1: {
      const double c = std::sqrt(3.0 / (4.0 * M_PI));
      return {c * y, c * z, c * x};
    }
    default: {
      const double c = 0.5 * std::sqrt(15.0 / M_PI);
      const double c0 = 0.25 * std::sqrt(5.0 / M_PI);
      return {c * x * y, c * y * z, c0 * (3.0 * z * z - 1.0), c * x * z, 0.5 * c * (x * x - y * y)};
    }
  }
}

ad::Tensor sph_harm_rows(int l, const std::vector<Eigen::Vector3d>& units) {
  const std::size_t d = static_cast<std::size_t>(2 * l + 1);
  std::vector<double> v;
  v.reserve(units.size() * d);
  for (const auto& u : units) {
    auto y = real_sph_harm(l, u);
    v.insert(v.end(), y.begin(), y.end());
  }
  return ad::Tensor::from({units.size(), d}, std::move(v));
}

void check_rotation(const Eigen::Matrix3d& r, const char* where) {
  if ((r.transpose() * r - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-9 || r.determinant() < 0) {
    throw ValueError(std::string(where) + ": matrix is not a proper rotation");
  }
}

Eigen::MatrixXd wigner_d(int l, const Eigen::Matrix3d& rotation) {
  check_l(l, "wigner_d");
  check_rotation(rotation, "wigner_d");
  const auto& dirs = probe_directions();
  const int d = 2 * l + 1;
  Eigen::MatrixXd before(d, dirs.size()), after(d, dirs.size());
  for (std::size_t k = 0; k < dirs.size(); ++k) {
    const auto y0 = real_sph_harm(l, dirs[k]);
    const Eigen::Vector3d ru = (rotation * dirs[k]).normalized();
    const auto y1 = real_sph_harm(l, ru);
    for (int m = 0; m < d; ++m) {
      before(m, k) = y0[m];
      after(m, k) = y1[m];
    }
  }
  // D * before = after in the least-squares sense (exact: Y_l spans the irrep).
  return (before * before.transpose()).ldlt().solve(before * after.transpose()).transpose();
}

bool CGTensor::is_zero() const {
  for (double v : values)
    if (v != 0.0) return false;
  return true;
}

ad::Coeff3 CGTensor::sparse(double tol) const {
  ad::Coeff3 c;
  c.d1 = d1();
  c.d2 = d2();
  c.d3 = d3();
  for (std::size_t a = 0; a < d1(); ++a)
    for (std::size_t b = 0; b < d2(); ++b)
      for (std::size_t k = 0; k < d3(); ++k) {
        const double v = at(a, b, k);
        if (std::abs(v) > tol) c.entries.push_back({a, b, k, v});
      }
  return c;
}

const CGTensor& cg_real(int l1, int l2, int l3) {
  check_l(l1, "cg_real");
  check_l(l2, "cg_real");
  check_l(l3, "cg_real");
  static std::array<CGTensor, 27> table;
  static std::once_flag once;
  std::call_once(once, [] {
    for (int a = 0; a <= kMaxL; ++a)
      for (int b = 0; b <= kMaxL; ++b)
        for (int c = 0; c <= kMaxL; ++c) table[(a * 3 + b) * 3 + c] = solve_cg(a, b, c);
  });
  return table[(l1 * 3 + l2) * 3 + l3];
}

double cg_equivariance_residual(const CGTensor& cg, const std::vector<Eigen::Matrix3d>& rotations) {
  const std::size_t d1 = cg.d1(), d2 = cg.d2(), d3 = cg.d3();
  double worst = 0.0;
  std::mt19937_64 rng(7);
  std::normal_distribution<double> g;
  for (const auto& r : rotations) {
    const Eigen::MatrixXd D1 = wigner_d(cg.l1, r), D2 = wigner_d(cg.l2, r), D3 = wigner_d(cg.l3, r);
    Eigen::VectorXd x(d1), y(d2);
    for (std::size_t i = 0; i < d1; ++i) x(i) = g(rng);
    for (std::size_t i = 0; i < d2; ++i) y(i) = g(rng);
    auto couple = [&](const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
      Eigen::VectorXd out = Eigen::VectorXd::Zero(d3);
      for (std::size_t a = 0; a < d1; ++a)
        for (std::size_t b = 0; b < d2; ++b)
          for (std::size_t c = 0; c < d3; ++c) out(c) += cg.at(a, b, c) * p(a) * q(b);
      return out;
    };
    const Eigen::VectorXd lhs = couple(D1 * x, D2 * y);
    const Eigen::VectorXd rhs = D3 * couple(x, y);
    worst = std::max(worst, (lhs - rhs).cwiseAbs().maxCoeff());
  }
  return worst;
}

EquivariantFeature rotate_feature(const EquivariantFeature& x, const Eigen::Matrix3d& rotation, bool improper) {
  if (x.blocks.size() != x.layout.size()) throw ShapeError("rotate_feature: blocks do not match layout " + x.layout.str());
  EquivariantFeature out{x.layout, {}};
  for (std::size_t k = 0; k < x.layout.size(); ++k) {
    const auto& irrep = x.layout[k];
    const auto& blk = x.blocks[k];
    const std::size_t d = irrep.components();
    if (blk.rank() != 3 || blk.dim(1) != irrep.multiplicity || blk.dim(2) != d) {
      throw ShapeError("rotate_feature: block " + ad::to_string(blk.shape()) + " does not match layout " + x.layout.str());
    }
    const Eigen::MatrixXd D = wigner_d(irrep.l, rotation);
    const double sign = improper ? parity_sign(irrep.parity) : 1.0;
    const auto v = blk.data();
    std::vector<double> r(v.size(), 0.0);
    const std::size_t rows = blk.dim(0) * irrep.multiplicity;
    for (std::size_t row = 0; row < rows; ++row)
      for (std::size_t i = 0; i < d; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += D(i, j) * v[row * d + j];
        r[row * d + i] = sign * s;
      }
    out.blocks.push_back(ad::Tensor::from(blk.shape(), std::move(r)));
  }
  return out;
}

Eigen::Matrix3d random_rotation(double u1, double u2, double u3) {
  // Shoemake's uniform quaternion.
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const Eigen::Quaterniond q(b * std::cos(2 * M_PI * u3), a * std::sin(2 * M_PI * u2), a * std::cos(2 * M_PI * u2),
                             b * std::sin(2 * M_PI * u3));
  return q.normalized().toRotationMatrix();
}

}  // namespace xane3::so3
