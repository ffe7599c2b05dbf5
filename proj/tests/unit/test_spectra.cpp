#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "doctest.h"
#include "xane3/errors.hpp"
#include "xane3/spectra/spectra.hpp"

using namespace xane3;
using namespace xane3::spectra;

namespace {

RawSpectrum dense(double e0, double (*f)(double), double lo = -40.0, double hi = 110.0, double h = 0.01) {
  RawSpectrum r;
  r.e0 = e0;
  for (double e = lo; e <= hi + 1e-9; e += h) {
    r.energies.push_back(e0 + e);
    r.mu.push_back(f(e));
  }
  return r;
}

double unit_step(double e) { return e >= 0 ? 1.0 : 0.0; }
double affine_step(double e) { return 0.3 - 0.01 * e + 2.0 * unit_step(e); }

// Edge-like curve: logistic step, white line and damped oscillation.
double xanes_like(double e) {
  const double edge = 1.0 / (1.0 + std::exp(-e / 1.5));
  const double white = 0.8 * std::exp(-0.5 * std::pow((e - 6.0) / 3.0, 2));
  const double turn_on = 1.0 / (1.0 + std::exp(-(e - 10.0) / 3.0));
  const double osc = 0.3 * turn_on * std::exp(-e / 10.0) * std::sin(0.4 * e);
  return edge + white + osc;
}

}  // namespace

TEST_CASE("canonical grid") {
  SpectrumGrid g;
  auto e = g.energies();
  REQUIRE(e.size() == 150);
  CHECK(e.front() == -30.0);
  CHECK(e.back() == doctest::Approx(100.0).epsilon(1e-14));
  for (std::size_t i = 1; i < e.size(); ++i) CHECK(std::abs(e[i] - e[i - 1] - 130.0 / 149.0) < 1e-12);
  SpectrumGrid bad;
  bad.n = 2;
  CHECK_THROWS_AS(bad.validate(), ValueError);
}

TEST_CASE("interpolate") {
  std::vector<double> x{0, 1, 3}, y{0, 2, 6};
  std::vector<double> at{0, 0.5, 2, 3};
  CHECK(interpolate(x, y, at) == std::vector<double>{0, 1, 4, 6});
  std::vector<double> outside{4};
  CHECK_THROWS_AS(interpolate(x, y, outside), ValueError);
}

TEST_CASE("normalize_edge_step examples") {
  SUBCASE("unit step is a fixed point") {
    auto y = normalize_edge_step(dense(7112.0, unit_step));
    SpectrumGrid g;
    for (std::size_t i = 0; i < g.n; ++i) CHECK(std::abs(y[i] - (g.at(i) >= 0 ? 1.0 : 0.0)) < 1e-9);
  }
  SUBCASE("affine baseline and step height are removed") {
    auto a = normalize_edge_step(dense(7112.0, unit_step));
    auto b = normalize_edge_step(dense(7112.0, affine_step));
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-9);
  }
  SUBCASE("edge-like curve: pre-edge near 0, post-edge near 1, idempotent") {
    auto raw = dense(8333.0, xanes_like, -45.0, 120.0, 0.37);
    auto y = normalize_edge_step(raw);
    SpectrumGrid g;
    double pre = 0, post = 0;
    int npre = 0, npost = 0;
    for (std::size_t i = 0; i < g.n; ++i) {
      if (g.at(i) <= kPreEdgeHi) pre += y[i], ++npre;
      if (g.at(i) >= kPostEdgeLo) post += y[i], ++npost;
    }
    CHECK(std::abs(pre / npre) < 0.02);
    CHECK(post / npost >= 0.95);
    CHECK(post / npost <= 1.05);

    RawSpectrum again;
    again.e0 = raw.e0;
    for (std::size_t i = 0; i < g.n; ++i) again.energies.push_back(raw.e0 + g.at(i));
    again.mu = y;
    auto z = normalize_edge_step(again);
    for (std::size_t i = 0; i < g.n; ++i) CHECK(std::abs(z[i] - y[i]) < 1e-6);
  }
}

TEST_CASE("normalize_edge_step errors") {
  SUBCASE("flat spectrum is degenerate") {
    auto r = dense(7000.0, [](double) { return 1.0; });
    CHECK_THROWS_AS(normalize_edge_step(r), ValueError);
  }
  SUBCASE("grid not covered") {
    auto r = dense(7000.0, unit_step, -20.0, 110.0);
    CHECK_THROWS_AS(normalize_edge_step(r), ValueError);
  }
  SUBCASE("too few points in a fit window") {
    RawSpectrum r;
    r.e0 = 0;
    for (double e : {-31.0, -5.0, 0.0, 10.0, 30.0, 50.0, 70.0, 101.0}) {
      r.energies.push_back(e);
      r.mu.push_back(unit_step(e));
    }
    CHECK_THROWS_AS(normalize_edge_step(r), ValueError);
  }
  SUBCASE("non-increasing energies") {
    auto r = dense(7000.0, unit_step);
    std::swap(r.energies[3], r.energies[4]);
    CHECK_THROWS_AS(normalize_edge_step(r), ValueError);
  }
}

TEST_CASE("read_two_column") {
  const auto path = std::filesystem::temp_directory_path() / "xane3_two_column.dat";
  {
    std::ofstream out(path);
    out << "# energy mu\n7100.0 0.1\n7101.5  0.2\n\n7103 0.4\n";
  }
  auto r = read_two_column(path.string(), 7112.0);
  CHECK(r.energies == std::vector<double>{7100.0, 7101.5, 7103.0});
  CHECK(r.mu == std::vector<double>{0.1, 0.2, 0.4});
  CHECK(r.e0 == 7112.0);
  {
    std::ofstream out(path);
    out << "7100.0 abc\n";
  }
  CHECK_THROWS_AS(read_two_column(path.string(), 0.0), IoError);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_two_column("/nonexistent.dat", 0.0), IoError);
}

TEST_CASE("finite_derivatives") {
  SpectrumGrid g;
  auto e = g.energies();
  std::vector<double> c(g.n, 3.5), sq(g.n);
  for (std::size_t i = 0; i < g.n; ++i) sq[i] = e[i] * e[i];

  auto dc = finite_derivatives(c, g);
  CHECK(dc.first.size() == 149);
  CHECK(dc.second.size() == 148);
  for (double v : dc.first) CHECK(v == 0.0);
  for (double v : dc.second) CHECK(v == 0.0);

  auto de = finite_derivatives(e, g);
  for (double v : de.first) CHECK(std::abs(v - 1.0) < 1e-12);
  for (double v : de.second) CHECK(std::abs(v) < 1e-9);

  auto dq = finite_derivatives(sq, g);
  for (double v : dq.second) CHECK(std::abs(v - 2.0) < 1e-9);

  std::vector<double> short_y{1.0, 2.0};
  SpectrumGrid two;
  two.n = 2;
  CHECK_THROWS_AS(finite_derivatives(short_y, two), ValueError);

  auto t = ad::Tensor::from({2, g.n}, [&] {
    std::vector<double> v(sq);
    v.insert(v.end(), e.begin(), e.end());
    return v;
  }());
  auto [d1, d2] = finite_derivatives(t, g);
  CHECK(d1.shape() == ad::Shape{2, 149});
  CHECK(d2.shape() == ad::Shape{2, 148});
  for (std::size_t i = 0; i < 148; ++i) {
    CHECK(d2[i] == doctest::Approx(dq.second[i]).epsilon(1e-12));
    CHECK(d1[149 + i] == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("basis layout") {
  BasisSpec spec;
  SpectrumGrid g;
  CHECK(spec.gaussians() == 200);
  CHECK(spec.rows() == 201);
  auto sig = spec.sigmas(g);
  auto c = spec.initial_centers(g);
  REQUIRE(sig.size() == 200);
  REQUIRE(c.size() == 200);
  CHECK(sig[0] == doctest::Approx(0.1 * 130.0 / 39.0));
  CHECK(sig[199] == doctest::Approx(4.0 * 130.0 / 39.0));
  for (std::size_t s = 0; s < 5; ++s) {
    CHECK(c[s * 40] == doctest::Approx(-30.0));
    CHECK(c[s * 40 + 39] == doctest::Approx(100.0));
  }
  BasisSpec bad;
  bad.scales = {1.0, -1.0};
  CHECK_THROWS_AS(bad.validate(), ValueError);
}

TEST_CASE("eval_basis examples") {
  BasisSpec spec;
  spec.scales = {1.0};
  spec.per_scale = 3;
  SpectrumGrid g;
  g.e_min = -2;
  g.e_max = 2;
  g.n = 5;
  ad::ParamStore store;
  auto p = add_basis_params(store, spec, g);
  // Centers start at -2, 0, 2 with sigma 2; move the middle one sigma away from E = 1.
  const double sigma = spec.sigmas(g)[0];
  p.centers.mutable_data()[1] = 1.0 - sigma;
  auto d = eval_basis(p, spec, g);
  REQUIRE(d.shape() == ad::Shape{4, 5});
  CHECK(d[0 * 5 + 0] == doctest::Approx(1.0));
  CHECK(d[1 * 5 + 3] == doctest::Approx(std::exp(-0.5)));
  CHECK(d[3 * 5 + 2] == doctest::Approx(0.5));  // background at mu_bg = 0
  CHECK(softplus_inverse(2.0) == doctest::Approx(std::log(std::exp(2.0) - 1.0)));
  CHECK(store.contains(kBasisCenters));
  CHECK(basis_params(store, spec).centers.node() == p.centers.node());

  BasisSpec no_bg = spec;
  no_bg.background = false;
  ad::ParamStore s2;
  auto d2 = eval_basis(add_basis_params(s2, no_bg, g), no_bg, g);
  CHECK(d2.shape() == ad::Shape{3, 5});
  CHECK_FALSE(s2.contains(kBasisMuBg));
}

TEST_CASE("eval_basis gradients match finite differences") {
  BasisSpec spec;
  spec.per_scale = 4;
  spec.scales = {0.5, 2.0};
  SpectrumGrid g;
  g.n = 20;
  ad::ParamStore store;
  add_basis_params(store, spec, g);
  store.get(kBasisCenters).node()->value[2] += 0.7;
  auto f = [&](ad::ParamStore& s) {
    auto d = eval_basis(basis_params(s, spec), spec, g);
    std::vector<double> w(d.numel());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(0.37 * static_cast<double>(i));
    return ad::sum(ad::mul(d, ad::Tensor::from(d.shape(), w)));
  };
  auto report = ad::finite_diff_check(f, store, 1e-6);
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("reconstruct") {
  BasisSpec spec;
  SpectrumGrid g;
  ad::ParamStore store;
  auto design = eval_basis(add_basis_params(store, spec, g), spec, g);

  auto zero = reconstruct(ad::Tensor::zeros({1, spec.rows()}), design);
  for (double v : zero.data()) CHECK(v == 0.0);

  std::vector<double> one(spec.rows(), 0.0);
  one[57] = 1.0;
  auto single = reconstruct(ad::Tensor::from({1, spec.rows()}, one), design);
  for (std::size_t i = 0; i < g.n; ++i) CHECK(single[i] == design[57 * g.n + i]);

  std::vector<double> a(spec.rows()), b(spec.rows()), ab(spec.rows());
  for (std::size_t k = 0; k < a.size(); ++k) {
    a[k] = std::cos(0.3 * k);
    b[k] = std::sin(0.7 * k);
    ab[k] = a[k] + b[k];
  }
  auto ra = reconstruct(ad::Tensor::from({1, a.size()}, a), design);
  auto rb = reconstruct(ad::Tensor::from({1, b.size()}, b), design);
  auto rab = reconstruct(ad::Tensor::from({1, ab.size()}, ab), design);
  for (std::size_t i = 0; i < g.n; ++i) CHECK(rab[i] == doctest::Approx(ra[i] + rb[i]).epsilon(1e-13));

  CHECK_THROWS_AS(reconstruct(ad::Tensor::zeros({1, 7}), design), ShapeError);
}

TEST_CASE("least-squares fit of an edge-like spectrum") {
  BasisSpec spec;
  SpectrumGrid g;
  ad::ParamStore store;
  auto design = eval_basis(add_basis_params(store, spec, g), spec, g);
  auto target = normalize_edge_step(dense(7112.0, xanes_like));
  auto coeffs = fit_coefficients(design, target);
  auto fit = reconstruct(ad::Tensor::from({1, coeffs.size()}, coeffs), design);
  std::vector<double> resid(g.n);
  for (std::size_t i = 0; i < g.n; ++i) resid[i] = fit[i] - target[i];
  CHECK(rms(resid) < 0.01 * rms(target));
}
