#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "xane3/graph/dataset.hpp"
#include "xane3/graph/graph.hpp"
#include "xane3/spectra/spectra.hpp"

namespace xane3::synth {

inline constexpr int kIron = 26;
inline constexpr int kOxygen = 8;
/// Edge energy anchor of the Fe K edge, eV.
inline constexpr double kFeKEdge = 7112.15;
/// Fe-O distance counted as a bond by the oracle, Angstrom.
inline constexpr double kBondCutoff = 3.0;

inline constexpr double kRocksaltA = 4.28;
inline constexpr double kSpinelA = 8.39;
/// Relative lattice-constant spread drawn per structure.
inline constexpr double kLatticeJitter = 0.02;
inline constexpr double kSlabVacuum = 15.0;

enum class Kind { Rocksalt, Spinel };

std::string to_string(Kind k);
Kind kind_from_string(const std::string& s);

struct StructureOptions {
  Kind kind = Kind::Rocksalt;
  double rattle = 0.05;  // Gaussian sigma per coordinate, Angstrom
  bool slab = false;     // rocksalt only: two cells along z, no periodicity along z
  bool jitter_lattice = true;
};

/// Small periodic Fe-O cell. Rocksalt: 8-atom cubic cell (16 atoms as a
/// slab). Spinel: 14-atom primitive cell of the ideal Fe3O4 spinel with
/// tetrahedral and octahedral Fe. Every Fe is an absorber site.
graph::Structure gen_structure(std::uint64_t seed, const StructureOptions& options);

/// Fe-O coordination of one absorber: O neighbors within kBondCutoff and
/// their mean distance.
struct Environment {
  int cn = 0;
  double mean_bond = 0.0;
};

Environment local_environment(const graph::Structure& s, std::size_t absorber);

/// Normalized absorption at energy e (eV relative to E0): logistic edge
/// step, Gaussian white line and a damped oscillation above 10 eV.
double oracle_mu(const Environment& env, double e);
double oracle_e0(const Environment& env);

struct OracleSpectrum {
  std::vector<double> spectrum;  // on the grid
  double e0 = 0.0;
};

/// Throws ValueError when the absorber has no O neighbor.
OracleSpectrum oracle_spectrum(const graph::Structure& s, std::size_t absorber, const spectra::SpectrumGrid& grid = {});

/// Unnormalized measurement of the same absorber: absolute energies on a
/// 0.5 eV grid from E0 - 60 to E0 + 150, a linear background and an edge
/// jump drawn from `seed`.
spectra::RawSpectrum raw_spectrum(const Environment& env, std::uint64_t seed);

struct DatasetOptions {
  std::size_t n = 512;
  std::uint64_t seed = 7;
  double spinel_fraction = 0.5;
  double slab_fraction = 0.25;  // of rocksalt structures
  double rattle_min = 0.01;
  double rattle_max = 0.1;

  void validate() const;
};

/// Structures are drawn in sequence, each contributing one record per Fe
/// absorber, until n records exist.
std::vector<graph::Record> generate_dataset(const DatasetOptions& options, const spectra::SpectrumGrid& grid = {});

/// Mean spectrum and the MSE of predicting it for every record.
struct Baseline {
  std::size_t records = 0;
  std::vector<double> mean_spectrum;
  double variance = 0.0;
};

Baseline variance_baseline(const std::vector<graph::Record>& records);
/// MSE of predicting `mean` for every record.
double mean_predictor_mse(const std::vector<graph::Record>& records, const std::vector<double>& mean);

nlohmann::json to_json(const Baseline& b);

/// Path of the baseline sidecar written next to a dataset file.
std::filesystem::path baseline_path(const std::filesystem::path& dataset);

/// Writes the JSON Lines dataset and its `<out>.baseline.json` sidecar.
void write_dataset(const std::filesystem::path& out, const std::vector<graph::Record>& records);

}  // namespace xane3::synth
