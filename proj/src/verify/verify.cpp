#include "xane3/verify/verify.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "xane3/data/synth.hpp"
#include "xane3/errors.hpp"
#include "xane3/objective/objective.hpp"
#include "xane3/so3/so3.hpp"

namespace xane3::verify {

namespace {

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("compared spectra differ in length");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

model::ForwardResult forward_one(const model::Model& m, const graph::Structure& s, bool keep_features = false) {
  model::ForwardOptions opts;
  opts.keep_features = keep_features;
  ad::NoGradGuard guard;
  return m.forward(graph::make_batch(std::vector<graph::AtomicGraph>{m.prepare(s, s.absorber_sites.at(0))}), opts);
}

Eigen::Matrix3d draw_rotation(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double a = u(rng), b = u(rng), c = u(rng);
  return so3::random_rotation(a, b, c);
}

Eigen::Vector3d draw_shift(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  const double x = u(rng), y = u(rng), z = u(rng);
  return {x, y, z};
}

}  // namespace

graph::Structure rigid_motion(const graph::Structure& s, const Eigen::Matrix3d& r, bool improper,
                              const Eigen::Vector3d& t) {
  const Eigen::Matrix3d op = improper ? Eigen::Matrix3d(-r) : r;
  graph::Structure out = s;
  for (auto& p : out.positions) p = op * p + t;
  out.lattice = s.lattice * op.transpose();
  return out;
}

std::vector<graph::Structure> sample_structures(std::size_t count, std::uint64_t seed) {
  std::vector<graph::Structure> out;
  for (std::size_t i = 0; i < count; ++i) {
    synth::StructureOptions opts;
    opts.kind = i % 3 == 1 ? synth::Kind::Spinel : synth::Kind::Rocksalt;
    opts.slab = i % 3 == 2;
    opts.rattle = 0.05;
    out.push_back(synth::gen_structure(seed + i, opts));
  }
  return out;
}

void perturb_parameters(model::Model& m, double scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  for (auto& e : m.params().entries()) {
    if (model::Model::is_basis_parameter(e.name)) continue;
    for (auto& v : e.tensor.mutable_data()) v += g(rng);
  }
}

InvarianceReport spectrum_invariance(const model::Model& m, const std::vector<graph::Structure>& structures,
                                     std::size_t motions, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  InvarianceReport report;
  for (const auto& s : structures) {
    const auto base = forward_one(m, s).spectrum;
    for (std::size_t t = 0; t < motions; ++t) {
      const auto r = draw_rotation(rng);
      const auto shift = draw_shift(rng);
      const auto moved = forward_one(m, rigid_motion(s, r, t % 2 == 1, shift)).spectrum;
      report.max_deviation = std::max(report.max_deviation, max_abs_diff(base.data(), moved.data()));
      ++report.motions;
    }
    ++report.structures;
  }
  return report;
}

double block_equivariance(const model::Model& m, const graph::Structure& s, std::size_t motions, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto base = forward_one(m, s, true);
  double worst = 0.0;
  for (std::size_t t = 0; t < motions; ++t) {
    const auto r = draw_rotation(rng);
    const bool improper = t % 2 == 1;
    const auto moved = forward_one(m, rigid_motion(s, r, improper, draw_shift(rng)), true);
    for (std::size_t k = 0; k < base.features.size(); ++k) {
      const auto expect = so3::rotate_feature(base.features[k], r, improper).to_flat();
      worst = std::max(worst, max_abs_diff(expect, moved.features[k].to_flat()));
    }
  }
  return worst;
}

double cg_residual(int l_max, std::size_t rotations, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Eigen::Matrix3d> rs;
  for (std::size_t i = 0; i < rotations; ++i) rs.push_back(draw_rotation(rng));
  double worst = 0.0;
  for (int l1 = 0; l1 <= l_max; ++l1)
    for (int l2 = 0; l2 <= l_max; ++l2)
      for (int l3 = 0; l3 <= l_max; ++l3) {
        worst = std::max(worst, so3::cg_equivariance_residual(so3::cg_real(l1, l2, l3), rs));
      }
  return worst;
}

ad::GradCheckReport tiny_gradcheck(std::uint64_t seed, double step) {
  const auto cfg = model::ModelConfig::tiny();
  model::Model m(cfg, seed);
  perturb_parameters(m, 0.2, seed + 1);
  std::mt19937_64 rng(seed + 2);
  const auto s = sample_structures(1, seed + 3).front();
  const auto batch = graph::make_batch(std::vector<graph::AtomicGraph>{m.prepare(s, s.absorber_sites.at(0))});

  std::normal_distribution<double> g(0.0, 0.5);
  std::vector<double> y(cfg.grid.n);
  for (auto& v : y) v = g(rng);
  const auto target = ad::Tensor::from({1, cfg.grid.n}, std::move(y));
  const auto target_e0 = ad::Tensor::from({1, 1}, {g(rng)});
  const objective::EffectiveWeights w{1.0, 1.0, 0.1};

  ad::Tensor z_fixed;
  {
    ad::NoGradGuard guard;
    z_fixed = m.forward(batch).z;
  }
  return ad::finite_diff_check(
      [&](ad::ParamStore&) {
        auto out = m.forward(batch);
        return objective::composite_loss(out.spectrum, target, m.e0_head(z_fixed), target_e0, w, cfg.grid).total;
      },
      m.params(), step);
}

LocalityReport locality_probe(const model::Model& m, std::uint64_t seed) {
  const auto& cfg = m.config();
  constexpr double kSpacing = 2.5;
  LocalityReport report;
  report.reach = static_cast<double>(cfg.layers) * cfg.r_max;
  if (!(kSpacing < cfg.r_max)) throw ValueError("locality probe needs r_max above the 2.5 A chain spacing");
  const auto atoms = static_cast<std::size_t>(std::floor(report.reach / kSpacing)) + 3;

  graph::Structure s;
  for (std::size_t i = 0; i < atoms; ++i) {
    s.positions.emplace_back(kSpacing * static_cast<double>(i), 0.3 * static_cast<double>(i % 2), 0.0);
    s.numbers.push_back(i == 0 ? synth::kIron : synth::kOxygen);
  }
  s.absorber_sites = {0};

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  auto moved = s;
  const double dx = u(rng), dy = u(rng), dz = u(rng);
  moved.positions.back() += Eigen::Vector3d(std::abs(dx), dy, dz);
  report.distance = (moved.positions.back() - moved.positions.front()).norm();

  report.max_change = max_abs_diff(forward_one(m, s).spectrum.data(), forward_one(m, moved).spectrum.data());
  return report;
}

}  // namespace xane3::verify
