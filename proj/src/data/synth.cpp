#include "xane3/data/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "xane3/errors.hpp"

namespace xane3::synth {

using graph::Structure;

namespace {

// Face-centred translations in units of the cubic lattice constant.
const Eigen::Vector3d kFcc[4] = {{0, 0, 0}, {0, 0.5, 0.5}, {0.5, 0, 0.5}, {0.5, 0.5, 0}};

double jittered(double a0, bool jitter, std::mt19937_64& rng) {
  if (!jitter) return a0;
  std::uniform_real_distribution<double> u(-kLatticeJitter, kLatticeJitter);
  return a0 * (1.0 + u(rng));
}

Structure rocksalt(double a, bool slab) {
  Structure s;
  const int cells = slab ? 2 : 1;
  s.lattice = Eigen::Matrix3d::Identity() * a;
  if (slab) s.lattice(2, 2) = cells * a + kSlabVacuum;
  s.pbc = {true, true, !slab};
  for (int species : {kIron, kOxygen}) {
    const Eigen::Vector3d offset = species == kIron ? Eigen::Vector3d::Zero() : Eigen::Vector3d(0.5, 0, 0);
    for (int c = 0; c < cells; ++c)
      for (const auto& f : kFcc) {
        s.positions.push_back((f + offset + Eigen::Vector3d(0, 0, c)) * a);
        s.numbers.push_back(species);
      }
  }
  return s;
}

// Ideal spinel (Fd-3m, origin choice 2, oxygen parameter 1/4) reduced to the
// 14-atom primitive cell: 2 tetrahedral Fe, 4 octahedral Fe, 8 O.
Structure spinel(double a) {
  const std::array<Eigen::Vector3d, 2> tetra_sites{Eigen::Vector3d(1, 1, 1) / 8.0, Eigen::Vector3d(7, 3, 3) / 8.0};
  const std::array<Eigen::Vector3d, 4> octa_sites{Eigen::Vector3d(2, 2, 2) / 4.0, Eigen::Vector3d(1, 3, 0) / 4.0,
                                                  Eigen::Vector3d(3, 0, 1) / 4.0, Eigen::Vector3d(0, 1, 3) / 4.0};
  std::vector<Eigen::Vector3d> tetra, octa, oxygen;
  for (const auto& f : kFcc) {
    for (const auto& t : tetra_sites) tetra.push_back(t + f);
    for (const auto& o : octa_sites) octa.push_back(o + f);
  }
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j)
      for (int k = 0; k < 4; ++k)
        if ((i + j + k) % 2 == 0) oxygen.push_back(Eigen::Vector3d(i + 1, j + 1, k + 1) / 4.0);

  Structure s;
  s.lattice << 0, 0.5, 0.5, 0.5, 0, 0.5, 0.5, 0.5, 0;
  s.lattice *= a;
  s.pbc = {true, true, true};
  const Eigen::Matrix3d to_frac = s.lattice.transpose().inverse();
  auto add_unique = [&](const std::vector<Eigen::Vector3d>& sites, int species) {
    std::vector<Eigen::Vector3d> seen;
    for (const auto& f : sites) {
      Eigen::Vector3d p = to_frac * (f * a);
      for (int d = 0; d < 3; ++d) {
        p[d] -= std::floor(p[d] + 1e-9);
        if (std::abs(p[d]) < 1e-9) p[d] = 0.0;
      }
      const bool dup = std::any_of(seen.begin(), seen.end(), [&](const Eigen::Vector3d& q) { return (q - p).norm() < 1e-6; });
      if (dup) continue;
      seen.push_back(p);
      s.positions.push_back(s.lattice.transpose() * p);
      s.numbers.push_back(species);
    }
  };
  add_unique(tetra, kIron);
  add_unique(octa, kIron);
  add_unique(oxygen, kOxygen);
  return s;
}

// Bond lengths rounded to 1e-9 Angstrom and summed in sorted order, so the
// descriptor does not see last-bit changes from rotations or relabeling.
double quantize(double d) { return std::round(d * 1e9) / 1e9; }

}  // namespace

std::string to_string(Kind k) { return k == Kind::Rocksalt ? "rocksalt" : "spinel"; }

Kind kind_from_string(const std::string& s) {
  if (s == "rocksalt") return Kind::Rocksalt;
  if (s == "spinel") return Kind::Spinel;
  throw ValueError("unknown structure kind '" + s + "' (expected rocksalt or spinel)");
}

Structure gen_structure(std::uint64_t seed, const StructureOptions& options) {
  if (!(options.rattle >= 0) || !std::isfinite(options.rattle)) throw ValueError("rattle sigma must be non-negative");
  if (options.slab && options.kind != Kind::Rocksalt) throw ValueError("slab geometry is only defined for rocksalt");
  std::mt19937_64 rng(seed);
  Structure s = options.kind == Kind::Rocksalt ? rocksalt(jittered(kRocksaltA, options.jitter_lattice, rng), options.slab)
                                               : spinel(jittered(kSpinelA, options.jitter_lattice, rng));
  if (options.rattle > 0) {
    std::normal_distribution<double> g(0.0, options.rattle);
    for (auto& p : s.positions)
      for (int d = 0; d < 3; ++d) p[d] += g(rng);
  }
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s.numbers[i] == kIron) s.absorber_sites.push_back(i);
  s.validate();
  return s;
}

Environment local_environment(const Structure& s, std::size_t absorber) {
  if (absorber >= s.size()) throw ValueError("absorber index " + std::to_string(absorber) + " out of range");
  if (s.numbers[absorber] != kIron) throw ValueError("oracle absorber must be Fe");
  const auto g = graph::build_graph(s, kBondCutoff, absorber);
  std::vector<double> bonds;
  for (std::size_t e = 0; e < g.edges(); ++e)
    if (g.edge_src[e] == absorber && g.numbers[g.edge_dst[e]] == kOxygen) bonds.push_back(quantize(g.edge_len[e]));
  std::sort(bonds.begin(), bonds.end());
  Environment env;
  env.cn = static_cast<int>(bonds.size());
  double sum = 0;
  for (double b : bonds) sum += b;
  env.mean_bond = bonds.empty() ? 0.0 : sum / static_cast<double>(bonds.size());
  return env;
}

double oracle_mu(const Environment& env, double e) {
  const double cn = env.cn;
  const double edge = 1.2 * (cn - 5.0);
  const double step = 1.0 / (1.0 + std::exp(-(e - edge) / 1.5));
  const double amp = 0.3 + 0.1 * (cn - 4.0);
  const double peak = edge + 4.0 + 12.0 * (2.15 - env.mean_bond);
  const double white = amp * std::exp(-(e - peak) * (e - peak) / 18.0);
  double osc = 0.0;
  if (e > 10.0) {
    const double t = e - 10.0;
    osc = 0.15 * t * t / (t * t + 9.0) * std::exp(-t / 10.0) * std::sin(0.2 * env.mean_bond * t);
  }
  return step + white + osc;
}

double oracle_e0(const Environment& env) { return kFeKEdge + 0.6 * (env.cn - 6); }

OracleSpectrum oracle_spectrum(const Structure& s, std::size_t absorber, const spectra::SpectrumGrid& grid) {
  grid.validate();
  const auto env = local_environment(s, absorber);
  if (env.cn == 0) throw ValueError("absorber " + std::to_string(absorber) + " has no O neighbor within 3 A");
  OracleSpectrum out;
  out.spectrum.reserve(grid.n);
  for (std::size_t i = 0; i < grid.n; ++i) out.spectrum.push_back(oracle_mu(env, grid.at(i)));
  out.e0 = oracle_e0(env);
  return out;
}

spectra::RawSpectrum raw_spectrum(const Environment& env, std::uint64_t seed) {
  if (env.cn == 0) throw ValueError("raw_spectrum needs a coordinated absorber");
  std::mt19937_64 rng(seed);
  const double offset = std::uniform_real_distribution<double>(0.05, 0.3)(rng);
  const double slope = std::uniform_real_distribution<double>(-1e-3, 1e-3)(rng);
  const double jump = std::uniform_real_distribution<double>(0.5, 2.0)(rng);
  spectra::RawSpectrum raw;
  raw.e0 = oracle_e0(env);
  for (int k = 0; k <= 420; ++k) {
    const double e = -60.0 + 0.5 * k;
    raw.energies.push_back(raw.e0 + e);
    raw.mu.push_back(offset + slope * e + jump * oracle_mu(env, e));
  }
  return raw;
}

void DatasetOptions::validate() const {
  if (n == 0) throw ConfigError("synth: n must be positive");
  if (!(spinel_fraction >= 0 && spinel_fraction <= 1)) throw ConfigError("synth: spinel_fraction must be in [0, 1]");
  if (!(slab_fraction >= 0 && slab_fraction <= 1)) throw ConfigError("synth: slab_fraction must be in [0, 1]");
  if (!(rattle_min >= 0 && rattle_min <= rattle_max && rattle_max <= 0.1)) {
    throw ConfigError("synth: rattle range must satisfy 0 <= min <= max <= 0.1 A");
  }
}

std::vector<graph::Record> generate_dataset(const DatasetOptions& options, const spectra::SpectrumGrid& grid) {
  options.validate();
  grid.validate();
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<graph::Record> records;
  while (records.size() < options.n) {
    StructureOptions so;
    so.kind = u(rng) < options.spinel_fraction ? Kind::Spinel : Kind::Rocksalt;
    so.slab = so.kind == Kind::Rocksalt && u(rng) < options.slab_fraction;
    so.rattle = options.rattle_min + (options.rattle_max - options.rattle_min) * u(rng);
    const auto s = gen_structure(rng(), so);
    for (std::size_t a : s.absorber_sites) {
      if (records.size() == options.n) break;
      graph::Record r;
      r.structure = s;
      r.structure.absorber_sites = {a};
      auto o = oracle_spectrum(s, a, grid);
      r.spectrum = std::move(o.spectrum);
      r.e0 = o.e0;
      records.push_back(std::move(r));
    }
  }
  return records;
}

Baseline variance_baseline(const std::vector<graph::Record>& records) {
  if (records.empty()) throw ValueError("variance baseline of an empty dataset");
  Baseline b;
  b.records = records.size();
  const std::size_t n = records.front().spectrum.size();
  b.mean_spectrum.assign(n, 0.0);
  for (const auto& r : records) {
    if (r.spectrum.size() != n) throw ShapeError("records have spectra of different lengths");
    for (std::size_t i = 0; i < n; ++i) b.mean_spectrum[i] += r.spectrum[i];
  }
  for (auto& v : b.mean_spectrum) v /= static_cast<double>(records.size());
  b.variance = mean_predictor_mse(records, b.mean_spectrum);
  return b;
}

double mean_predictor_mse(const std::vector<graph::Record>& records, const std::vector<double>& mean) {
  if (records.empty()) throw ValueError("mean predictor MSE of an empty dataset");
  double total = 0;
  for (const auto& r : records) {
    if (r.spectrum.size() != mean.size()) throw ShapeError("mean spectrum length differs from the records");
    double se = 0;
    for (std::size_t i = 0; i < mean.size(); ++i) se += (r.spectrum[i] - mean[i]) * (r.spectrum[i] - mean[i]);
    total += se / static_cast<double>(mean.size());
  }
  return total / static_cast<double>(records.size());
}

nlohmann::json to_json(const Baseline& b) {
  return {{"records", b.records}, {"variance", b.variance}, {"mean_spectrum", b.mean_spectrum}};
}

std::filesystem::path baseline_path(const std::filesystem::path& dataset) {
  return std::filesystem::path(dataset.string() + ".baseline.json");
}

void write_dataset(const std::filesystem::path& out, const std::vector<graph::Record>& records) {
  graph::write_jsonl(out, records);
  std::ofstream f(baseline_path(out), std::ios::trunc);
  if (!f) throw IoError("cannot write " + baseline_path(out).string());
  f << to_json(variance_baseline(records)).dump(2) << '\n';
}

}  // namespace xane3::synth
