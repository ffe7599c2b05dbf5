#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "fixtures.hpp"
#include "xane3/errors.hpp"
#include "xane3/model/checkpoint.hpp"
#include "xane3/model/model.hpp"

using namespace xane3;
using namespace xane3::model;
using so3::EquivariantFeature;
using so3::IrrepsLayout;

namespace {

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

ad::Tensor random_tensor(std::mt19937_64& rng, ad::Shape shape, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<double> v(ad::numel(shape));
  for (auto& x : v) x = g(rng);
  return ad::Tensor::from(std::move(shape), std::move(v));
}

EquivariantFeature random_feature(std::mt19937_64& rng, std::size_t atoms, std::size_t m0, std::size_t m1,
                                  std::size_t m2) {
  auto layout = IrrepsLayout::hidden(m0, m1, m2);
  std::vector<double> flat(atoms * layout.dim());
  std::normal_distribution<double> g;
  for (auto& v : flat) v = g(rng);
  return EquivariantFeature::from_flat(layout, atoms, flat);
}

// Randomise every parameter so that no path is trivially zero.
void randomize(Model& m, std::uint64_t seed, double scale = 0.3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  for (auto& e : m.params().entries()) {
    if (e.name.rfind("basis.", 0) == 0) continue;
    for (auto& v : e.tensor.mutable_data()) v += g(rng);
  }
}

std::vector<double> spectrum_of(const Model& m, const graph::Structure& s) {
  auto g = m.prepare(s, s.absorber_sites.at(0));
  auto out = m.forward(graph::make_batch(std::vector<graph::AtomicGraph>{g}));
  return {out.spectrum.data().begin(), out.spectrum.data().end()};
}

ModelConfig small_config() {
  ModelConfig c;
  c.layers = 2;
  c.m0 = 8;
  c.m1 = 4;
  c.m2 = 2;
  c.readout_hidden = 32;
  c.basis.per_scale = 10;
  return c;
}

}  // namespace

TEST_CASE("radial basis") {
  const double rc = 5.0;
  for (double v : radial_basis(rc, 16, rc, RadialKind::Bessel)) CHECK(std::abs(v) < 1e-15);
  auto half = radial_basis(rc / 2, 16, rc, RadialKind::Bessel);
  for (std::size_t n = 1; n <= 16; ++n) {
    const double raw = std::sqrt(2.0 / rc) * std::sin(n * M_PI / 2.0) / (rc / 2.0);
    CHECK(half[n - 1] == doctest::Approx(0.5 * raw).epsilon(1e-12));
  }
  auto tiny = radial_basis(1e-9, 16, rc, RadialKind::Bessel);
  for (std::size_t n = 1; n <= 16; ++n) CHECK(tiny[n - 1] == doctest::Approx(std::sqrt(2.0 / rc) * n * M_PI / rc));
  auto gauss = radial_basis(rc / 16, 16, rc, RadialKind::Gaussian);
  CHECK(gauss[0] == doctest::Approx(0.5 * (std::cos(M_PI / 16) + 1.0)));
  CHECK_THROWS_AS(radial_basis(0.0, 16, rc, RadialKind::Bessel), ValueError);
  CHECK_THROWS_AS(radial_basis(-1.0, 16, rc, RadialKind::Gaussian), ValueError);
}

TEST_CASE("tensor product paths") {
  CHECK(tp_paths({4, 2, 1}, {7, 2, 1}).size() == 11);
  CHECK(tp_paths({4, 0, 0}, {7, 2, 1}).size() == 3);
  CHECK(tp_paths({63, 0, 0}, {63, 0, 0}).size() == 1);
  for (const auto& p : tp_paths({4, 2, 1}, {7, 2, 1})) {
    CHECK((p.l_in + p.l_f + p.l_out) % 2 == 0);
    CHECK(p.l_out <= p.l_in + p.l_f);
    CHECK(p.l_out >= std::abs(p.l_in - p.l_f));
  }
}

TEST_CASE("config") {
  ModelConfig c;
  CHECK(c.readout_input() == 88);
  CHECK(c.coefficient_count() == 201);
  c.use_background = false;
  CHECK(c.coefficient_count() == 200);
  c.scalar_only = true;
  CHECK(c.hidden_m0() == 63);
  CHECK(c.hidden_m1() == 0);
  CHECK(c.readout_input() == 126);

  auto j = to_json(small_config());
  auto back = model_config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK_THROWS_AS(model_config_from_json(nlohmann::json{{"layerz", 3}}), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(nlohmann::json{{"layers", 0}}), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(nlohmann::json{{"layers", "four"}}), ConfigError);

  std::vector<double> e0{7110.0, 7112.0, 7115.5};
  auto z = ZScore::fit(e0);
  for (double v : e0) CHECK(std::abs(z.inverse(z.forward(v)) - v) < 1e-12);
}

TEST_CASE("embedding") {
  Model m(small_config(), 1);
  auto h = m.embed({26, 8, 26});
  const auto& s = h.block(0);
  REQUIRE(s.shape() == ad::Shape{3, 8, 1});
  for (std::size_t c = 0; c < 8; ++c) CHECK(s[c] == s[16 + c]);
  CHECK_THROWS_AS(m.embed({0}), ValueError);
  CHECK_THROWS_AS(m.embed({119}), ValueError);

  m.params().zero_grad();
  ad::backprop(ad::sum(m.embed({26, 8}).block(0)));
  const auto grad = m.params().get("embedding").grad();
  for (std::size_t z = 0; z < kEmbeddingRows; ++z) {
    const bool present = z == 26 || z == 8;
    for (std::size_t c = 0; c < 8; ++c) CHECK((grad[z * 8 + c] != 0.0) == present);
  }
}

TEST_CASE("tensor product message properties") {
  std::mt19937_64 rng(3);
  Model m(small_config(), 2);
  randomize(m, 3);
  auto s = testing::random_structure(rng);
  auto g = graph::build_graph(s, 5.0, 0);
  const auto cfg = m.config();

  TensorProduct tp;
  tp.in = {8, 4, 2};
  tp.out = {14, 4, 2};
  tp.paths = tp_paths(tp.in, tp.out);
  for (int l = 0; l < 3; ++l) {
    std::size_t width = 0;
    for (const auto& p : tp.paths)
      if (p.l_out == l) width += tp.in[p.l_in];
    tp.weights[l] = random_tensor(rng, {cfg.radial_count * width, tp.out[l]}, 0.3);
  }
  auto h = random_feature(rng, s.size(), 8, 4, 2);

  SUBCASE("rotation equivariance") {
    auto geo = edge_geometry(graph::make_batch(std::vector<graph::AtomicGraph>{g}), cfg);
    auto msg = tp(h, geo);
    for (int trial = 0; trial < 3; ++trial) {
      const auto r = testing::random_rotation(rng);
      const bool improper = trial == 1;
      auto gr = graph::build_graph(testing::rigid_motion(s, r, improper, Eigen::Vector3d::Zero()), 5.0, 0);
      auto geo_r = edge_geometry(graph::make_batch(std::vector<graph::AtomicGraph>{gr}), cfg);
      auto rotated_input = so3::rotate_feature(h, r, improper);
      auto lhs = tp(rotated_input, geo_r).to_flat();
      auto rhs = so3::rotate_feature(msg, r, improper).to_flat();
      CHECK(max_abs_diff(lhs, rhs) < 1e-9);
    }
  }
  SUBCASE("no edges gives zero messages") {
    graph::AtomicGraph empty = g;
    empty.edge_src.clear();
    empty.edge_dst.clear();
    empty.edge_vec.clear();
    empty.edge_len.clear();
    empty.edge_shift.clear();
    auto geo = edge_geometry(graph::make_batch(std::vector<graph::AtomicGraph>{empty}), cfg);
    for (double v : tp(h, geo).to_flat()) CHECK(v == 0.0);
  }
  SUBCASE("duplicated edges give the same mean") {
    graph::AtomicGraph twice = g;
    for (std::size_t e = 0; e < g.edges(); ++e) {
      twice.edge_src.push_back(g.edge_src[e]);
      twice.edge_dst.push_back(g.edge_dst[e]);
      twice.edge_vec.push_back(g.edge_vec[e]);
      twice.edge_len.push_back(g.edge_len[e]);
      twice.edge_shift.push_back(g.edge_shift[e]);
    }
    auto a = tp(h, edge_geometry(graph::make_batch(std::vector<graph::AtomicGraph>{g}), cfg)).to_flat();
    auto b = tp(h, edge_geometry(graph::make_batch(std::vector<graph::AtomicGraph>{twice}), cfg)).to_flat();
    CHECK(max_abs_diff(a, b) < 1e-12);
  }
  SUBCASE("layout mismatch") {
    auto wrong = random_feature(rng, s.size(), 8, 3, 2);
    auto geo = edge_geometry(graph::make_batch(std::vector<graph::AtomicGraph>{g}), cfg);
    CHECK_THROWS_AS(tp(wrong, geo), ShapeError);
  }
}

TEST_CASE("equivariant layer norm") {
  std::mt19937_64 rng(4);
  LayerNorm ln;
  ln.gamma = {random_tensor(rng, {1, 5, 1}), random_tensor(rng, {1, 3, 1}), random_tensor(rng, {1, 2, 1})};
  ln.beta0 = random_tensor(rng, {1, 5, 1});
  auto x = random_feature(rng, 4, 5, 3, 2);

  SUBCASE("l=1 block is scale invariant") {
    auto big = x;
    big.blocks[1] = ad::scale(x.blocks[1], 10.0);
    CHECK(max_abs_diff(ln(x).block(1).data(), ln(big).block(1).data()) < 1e-6);
  }
  SUBCASE("rotation commutes") {
    const auto r = testing::random_rotation(rng);
    auto lhs = ln(so3::rotate_feature(x, r, true)).to_flat();
    auto rhs = so3::rotate_feature(ln(x), r, true).to_flat();
    CHECK(max_abs_diff(lhs, rhs) < 1e-12);
  }
  SUBCASE("constant scalars map to beta") {
    auto c = x;
    c.blocks[0] = ad::Tensor::full({4, 5, 1}, 2.5);
    auto y = ln(c).block(0);
    for (std::size_t n = 0; n < 4; ++n)
      for (std::size_t ch = 0; ch < 5; ++ch) CHECK(y[n * 5 + ch] == doctest::Approx(ln.beta0[ch]).epsilon(1e-12));
  }
}

TEST_CASE("gate") {
  std::mt19937_64 rng(5);
  auto x = random_feature(rng, 3, 4 + 2 + 1, 2, 1);
  std::array<std::size_t, 3> hidden{4, 2, 1};

  SUBCASE("zero logits halve the non-scalar blocks") {
    auto z = x;
    std::vector<double> s(x.block(0).data().begin(), x.block(0).data().end());
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t c = 4; c < 7; ++c) s[n * 7 + c] = 0.0;
    z.blocks[0] = ad::Tensor::from({3, 7, 1}, s);
    auto y = gate(z, hidden);
    CHECK(y.layout == IrrepsLayout::hidden(4, 2, 1));
    for (std::size_t i = 0; i < x.block(1).numel(); ++i) CHECK(y.block(1)[i] == doctest::Approx(0.5 * x.block(1)[i]));
    for (std::size_t i = 0; i < x.block(2).numel(); ++i) CHECK(y.block(2)[i] == doctest::Approx(0.5 * x.block(2)[i]));
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t c = 0; c < 4; ++c) {
        const double v = s[n * 7 + c];
        CHECK(y.block(0)[n * 4 + c] == doctest::Approx(v / (1.0 + std::exp(-v))));
      }
  }
  SUBCASE("very negative logits close the gates") {
    auto z = x;
    std::vector<double> s(x.block(0).data().begin(), x.block(0).data().end());
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t c = 4; c < 7; ++c) s[n * 7 + c] = -60.0;
    z.blocks[0] = ad::Tensor::from({3, 7, 1}, s);
    auto y = gate(z, hidden);
    for (double v : y.block(1).data()) CHECK(std::abs(v) < 1e-20);
    for (double v : y.block(2).data()) CHECK(std::abs(v) < 1e-20);
  }
  SUBCASE("rotation commutes") {
    const auto r = testing::random_rotation(rng);
    auto lhs = gate(so3::rotate_feature(x, r, false), hidden).to_flat();
    auto rhs = so3::rotate_feature(gate(x, hidden), r, false).to_flat();
    CHECK(max_abs_diff(lhs, rhs) < 1e-12);
  }
  SUBCASE("missing gate channels") {
    auto short_x = random_feature(rng, 3, 4, 2, 1);
    CHECK_THROWS_AS(gate(short_x, hidden), ShapeError);
  }
}

TEST_CASE("gated residual") {
  std::mt19937_64 rng(6);
  GatedResidual res;
  res.self = {random_tensor(rng, {4, 4}), random_tensor(rng, {2, 2}), random_tensor(rng, {1, 1})};
  res.self_bias = random_tensor(rng, {1, 4, 1});
  res.gate_in = {random_tensor(rng, {8, 6}), random_tensor(rng, {1, 6})};
  auto prev = random_feature(rng, 3, 4, 2, 1);
  auto msg = random_feature(rng, 3, 4, 2, 1);

  auto self_branch = [&] {
    EquivariantFeature out{prev.layout, {}};
    out.blocks.push_back(ad::add(ad::mix_channels(prev.blocks[0], res.self[0]), res.self_bias));
    out.blocks.push_back(ad::mix_channels(prev.blocks[1], res.self[1]));
    out.blocks.push_back(ad::mix_channels(prev.blocks[2], res.self[2]));
    return out.to_flat();
  }();

  SUBCASE("gate forced open keeps the self branch") {
    res.gate_out = {ad::Tensor::zeros({6, 7}), ad::Tensor::full({1, 7}, 60.0)};
    CHECK(max_abs_diff(res(prev, msg).to_flat(), self_branch) < 1e-12);
  }
  SUBCASE("gate forced shut keeps the message") {
    res.gate_out = {ad::Tensor::zeros({6, 7}), ad::Tensor::full({1, 7}, -60.0)};
    CHECK(max_abs_diff(res(prev, msg).to_flat(), msg.to_flat()) < 1e-12);
  }
  SUBCASE("ungated residual is a plain sum") {
    res.gate_out = {random_tensor(rng, {6, 7}), random_tensor(rng, {1, 7})};
    res.gated = false;
    auto out = res(prev, msg).to_flat();
    auto m = msg.to_flat();
    for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(self_branch[i] + m[i]));
  }
  SUBCASE("layout mismatch") {
    res.gate_out = {random_tensor(rng, {6, 7}), random_tensor(rng, {1, 7})};
    CHECK_THROWS_AS(res(prev, random_feature(rng, 3, 4, 1, 1)), ShapeError);
  }
}

TEST_CASE("pooling") {
  std::mt19937_64 rng(7);
  AttentionPool pool{{random_tensor(rng, {6, 5}), random_tensor(rng, {1, 5})},
                     {random_tensor(rng, {5, 1}), random_tensor(rng, {1, 1})}};
  // Graph 0: absorber 0 with one other atom 1. Graph 1: absorber 2 with identical atoms 3 and 4.
  graph::Batch batch;
  batch.numbers = {26, 8, 26, 8, 8};
  batch.graphs = {{0, 0, 2, {0}}, {1, 2, 5, {2}}};
  batch.backbones = 2;
  auto idx = pool_index(batch);
  CHECK(idx.other_node == std::vector<std::size_t>{1, 3, 4});

  const std::vector<double> sv = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 10, 11, 12};
  auto s = ad::Tensor::from({5, 3}, sv);
  auto query = absorber_mean(s, idx);
  auto [ctx, alpha] = pool(s, query, idx);
  REQUIRE(ctx.shape() == ad::Shape{2, 3});
  for (std::size_t c = 0; c < 3; ++c) CHECK(ctx[c] == doctest::Approx(sv[3 + c]));
  CHECK(alpha[0] == doctest::Approx(1.0));
  CHECK(alpha[1] == doctest::Approx(0.5));
  CHECK(alpha[2] == doctest::Approx(0.5));

  auto mean = mean_pool(s, idx);
  for (std::size_t c = 0; c < 3; ++c) CHECK(mean[3 + c] == doctest::Approx(sv[9 + c]));

  SUBCASE("graph without other atoms gets a zero context") {
    graph::Batch lonely;
    lonely.numbers = {26};
    lonely.graphs = {{0, 0, 1, {0}}};
    lonely.backbones = 1;
    auto li = pool_index(lonely);
    auto one = ad::Tensor::from({1, 3}, {1, 2, 3});
    auto [c1, a1] = pool(one, absorber_mean(one, li), li);
    for (double v : c1.data()) CHECK(v == 0.0);
    auto lonely_mean = mean_pool(one, li);
    for (double v : lonely_mean.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("invariant norms") {
  std::mt19937_64 rng(8);
  graph::Batch batch;
  batch.numbers = {26, 8, 26};
  batch.graphs = {{0, 0, 3, {0, 2}}};
  batch.backbones = 1;
  auto idx = pool_index(batch);

  auto zero = ad::Tensor::zeros({3, 2, 3});
  auto guarded = invariant_norms(zero, idx);
  for (double v : guarded.data()) CHECK(v == doctest::Approx(1e-6));

  auto x = random_feature(rng, 3, 1, 4, 2);
  auto r = testing::random_rotation(rng);
  auto y = so3::rotate_feature(x, r, true);
  CHECK(max_abs_diff(invariant_norms(x.block(1), idx).data(), invariant_norms(y.block(1), idx).data()) < 1e-10);
  CHECK(max_abs_diff(invariant_norms(x.block(2), idx).data(), invariant_norms(y.block(2), idx).data()) < 1e-10);
}

TEST_CASE("readout and heads") {
  std::mt19937_64 rng(9);
  auto s = testing::random_structure(rng);
  Model m(small_config(), 10);
  auto g = m.prepare(s, 0);
  auto batch = graph::make_batch(std::vector<graph::AtomicGraph>{g});

  SUBCASE("zero-initialised final layer predicts the zero spectrum") {
    auto out = m.forward(batch);
    for (double v : out.coefficients.data()) CHECK(v == 0.0);
    for (double v : out.spectrum.data()) CHECK(v == 0.0);
    CHECK(out.coefficients.dim(1) == 51);
  }
  SUBCASE("no background drops one coefficient") {
    auto c = small_config();
    c.use_background = false;
    Model nb(c, 10);
    CHECK(nb.forward(batch).coefficients.dim(1) == 50);
    CHECK_FALSE(nb.params().contains(spectra::kBasisMuBg));
  }
  SUBCASE("evaluation is deterministic and training dropout is seeded") {
    randomize(m, 11);
    auto a = m.forward(batch).spectrum;
    auto b = m.forward(batch).spectrum;
    CHECK(max_abs_diff(a.data(), b.data()) == 0.0);
    std::mt19937_64 r1(5), r2(5);
    auto t1 = m.forward(batch, {true, &r1}).spectrum;
    auto t2 = m.forward(batch, {true, &r2}).spectrum;
    CHECK(max_abs_diff(t1.data(), t2.data()) == 0.0);
    CHECK_THROWS_AS(m.forward(batch, {true, nullptr}), ValueError);
  }
  SUBCASE("e0 loss leaves the backbone untouched") {
    randomize(m, 12);
    m.params().zero_grad();
    auto out = m.forward(batch);
    ad::backprop(ad::sum(ad::abs(ad::add_scalar(out.e0, -0.3))));
    bool head_moved = false;
    for (const auto& e : m.params().entries()) {
      const bool head = e.name.rfind("e0.", 0) == 0;
      double norm = 0;
      for (double v : e.tensor.grad()) norm += std::abs(v);
      if (head) {
        head_moved = head_moved || norm > 0;
      } else {
        CHECK_MESSAGE(norm == 0.0, e.name);
      }
    }
    CHECK(head_moved);
  }
}

TEST_CASE("forward invariances") {
  std::mt19937_64 rng(13);
  Model m(small_config(), 14);
  randomize(m, 15);

  SUBCASE("rigid motions") {
    for (int i = 0; i < 3; ++i) {
      auto s = testing::random_structure(rng);
      auto base = spectrum_of(m, s);
      for (int t = 0; t < 4; ++t) {
        const auto r = testing::random_rotation(rng);
        const Eigen::Vector3d shift(1.7 * t, -0.4, 2.2);
        auto moved = spectrum_of(m, testing::rigid_motion(s, r, t % 2 == 1, shift));
        CHECK(max_abs_diff(base, moved) < 1e-6);
      }
    }
  }
  SUBCASE("atom permutation with remapped absorber") {
    auto s = testing::random_structure(rng, 7);
    auto base = spectrum_of(m, s);
    graph::Structure p = s;
    std::vector<std::size_t> perm{3, 6, 0, 2, 5, 1, 4};
    for (std::size_t i = 0; i < perm.size(); ++i) {
      p.positions[i] = s.positions[perm[i]];
      p.numbers[i] = s.numbers[perm[i]];
    }
    p.absorber_sites = {2};
    CHECK(max_abs_diff(base, spectrum_of(m, p)) < 1e-10);
  }
  SUBCASE("batching") {
    auto s1 = testing::random_structure(rng);
    auto s2 = testing::random_structure(rng);
    auto g1 = m.prepare(s1, 0), g2 = m.prepare(s2, 0);
    auto single = m.forward(graph::make_batch(std::vector<graph::AtomicGraph>{g1})).spectrum;
    auto pair = m.forward(graph::make_batch(std::vector<graph::AtomicGraph>{g1, g2})).spectrum;
    auto swapped = m.forward(graph::make_batch(std::vector<graph::AtomicGraph>{g2, g1})).spectrum;
    auto same = m.forward(graph::make_batch(std::vector<graph::AtomicGraph>{g1, g1})).spectrum;
    const std::size_t n = single.numel();
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(pair[i] == single[i]);
      CHECK(swapped[n + i] == single[i]);
      CHECK(pair[n + i] == swapped[i]);
      CHECK(same[i] == same[n + i]);
    }
  }
}

TEST_CASE("per-block equivariance") {
  std::mt19937_64 rng(16);
  Model m(small_config(), 17);
  randomize(m, 18);
  auto s = testing::random_structure(rng);
  const auto r = testing::random_rotation(rng);
  for (bool improper : {false, true}) {
    auto moved = testing::rigid_motion(s, r, improper, Eigen::Vector3d(0.3, 0.2, -0.1));
    ForwardOptions keep;
    keep.keep_features = true;
    auto a = m.forward(graph::make_batch(std::vector<graph::AtomicGraph>{m.prepare(s, 0)}), keep);
    auto b = m.forward(graph::make_batch(std::vector<graph::AtomicGraph>{m.prepare(moved, 0)}), keep);
    REQUIRE(a.features.size() == 3);
    for (std::size_t k = 0; k < a.features.size(); ++k) {
      auto expect = so3::rotate_feature(a.features[k], r, improper).to_flat();
      CHECK(max_abs_diff(expect, b.features[k].to_flat()) < 1e-8);
    }
  }
}

TEST_CASE("receptive field crop") {
  ModelConfig c = small_config();
  Model m(c, 19);
  randomize(m, 20);
  // Open chain of atoms 2.5 A apart: with 2 layers and r_max 5 the far end is > 10 A away.
  graph::Structure s;
  for (int i = 0; i < 8; ++i) {
    s.positions.push_back({2.5 * i, 0.3 * (i % 2), 0.0});
    s.numbers.push_back(i == 0 ? 26 : 8);
  }
  s.absorber_sites = {0};
  auto base = spectrum_of(m, s);
  auto moved = s;
  moved.positions[7] += Eigen::Vector3d(0.2, -0.3, 0.1);
  REQUIRE((moved.positions[7] - s.positions[0]).norm() > 10.0);
  auto after = spectrum_of(m, moved);
  CHECK(max_abs_diff(base, after) == 0.0);

  // Without the crop the far atom still reaches the pooled context.
  c.receptive_crop = false;
  Model open(c, 19);
  randomize(open, 20);
  CHECK(max_abs_diff(spectrum_of(open, s), spectrum_of(open, moved)) > 0.0);
}

TEST_CASE("activation scale at initialisation") {
  std::mt19937_64 rng(21);
  Model m(ModelConfig{}, 22);
  for (int t = 0; t < 3; ++t) {
    auto s = testing::random_structure(rng, 8, 6.0);
    ForwardOptions keep;
    keep.keep_features = true;
    auto out = m.forward(graph::make_batch(std::vector<graph::AtomicGraph>{m.prepare(s, 0)}), keep);
    for (const auto& f : out.features) {
      for (std::size_t b = 0; b < f.blocks.size(); ++b) {
        double ss = 0;
        for (double v : f.blocks[b].data()) ss += v * v;
        const double rms = std::sqrt(ss / static_cast<double>(f.blocks[b].numel()));
        CHECK(rms >= 0.1);
        CHECK(rms <= 10.0);
      }
    }
  }
}

TEST_CASE("parameter report") {
  Model m(ModelConfig{}, 1);
  std::size_t total = 0;
  for (const auto& [name, n] : m.parameter_report()) total += n;
  CHECK(total == m.params().count());
  CHECK(Model::is_basis_parameter("basis.centers"));
  CHECK_FALSE(Model::is_basis_parameter("block0.tp.w0"));

  ModelConfig scalar;
  scalar.scalar_only = true;
  Model ms(scalar, 1);
  for (const auto& e : ms.params().entries()) CHECK(e.name.find("w1") == std::string::npos);
}

TEST_CASE("checkpoint round trip") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "xane3_ckpt_test";
  fs::remove_all(dir);
  std::mt19937_64 rng(23);
  auto cfg = small_config();
  cfg.use_attention_pool = false;
  Model m(cfg, 24);
  randomize(m, 25);
  const ZScore z{7112.5, 1.75};
  save_checkpoint(dir, m, z, nlohmann::json{{"epoch", 3}});

  auto loaded = load_checkpoint(dir);
  CHECK(loaded.e0.mean == z.mean);
  CHECK(loaded.e0.std == z.std);
  CHECK(loaded.extra["epoch"] == 3);
  CHECK(to_json(loaded.model->config()) == to_json(cfg));
  CHECK(loaded.model->params().flatten() == m.params().flatten());
  auto s = testing::random_structure(rng);
  CHECK(spectrum_of(*loaded.model, s) == spectrum_of(m, s));

  // Saving the loaded model reproduces the files byte for byte.
  const fs::path again = dir / "again";
  save_checkpoint(again, *loaded.model, loaded.e0, loaded.extra);
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(dir / kParamsFile) == slurp(again / kParamsFile));
  CHECK(slurp(dir / kManifestFile) == slurp(again / kManifestFile));

  SUBCASE("truncated blob") {
    fs::resize_file(dir / kParamsFile, 16);
    CHECK_THROWS_AS(load_checkpoint(dir), IoError);
  }
  SUBCASE("missing directory") { CHECK_THROWS_AS(load_checkpoint(dir / "nope"), IoError); }
  SUBCASE("renamed parameter") {
    auto text = slurp(dir / kManifestFile);
    text.replace(text.find("\"embedding\""), 11, "\"embeddinx\"");
    std::ofstream(dir / kManifestFile) << text;
    CHECK_THROWS_AS(load_checkpoint(dir), IoError);
  }
  fs::remove_all(dir);
}
