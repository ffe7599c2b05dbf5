#pragma once

#include <cstddef>
#include <span>

#include "json.hpp"
#include "xane3/spectra/spectra.hpp"

namespace xane3::model {

enum class RadialKind { Bessel, Gaussian };

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t m0 = 32, m1 = 16, m2 = 8;
  std::size_t radial_count = 16;
  RadialKind radial_kind = RadialKind::Bessel;
  double r_max = 5.0;
  std::size_t readout_hidden = 256;
  std::size_t attention_hidden = 64;
  std::size_t gate_hidden = 64;
  std::size_t e0_hidden = 64;
  double dropout = 0.01;

  bool use_layernorm = true;
  bool use_gated_residual = true;
  bool use_attention_pool = true;
  bool use_background = true;
  /// Drops every l > 0 channel and widens the scalars to scalar_only_m0.
  bool scalar_only = false;
  std::size_t scalar_only_m0 = 63;
  /// Restrict each graph to atoms within `layers` hops of its absorbers.
  bool receptive_crop = true;

  spectra::BasisSpec basis;
  spectra::SpectrumGrid grid;

  /// Multiplicities actually used after applying scalar_only.
  std::size_t hidden_m0() const { return scalar_only ? scalar_only_m0 : m0; }
  std::size_t hidden_m1() const { return scalar_only ? 0 : m1; }
  std::size_t hidden_m2() const { return scalar_only ? 0 : m2; }
  /// Width of the pooled invariant vector fed to the readout.
  std::size_t readout_input() const { return 2 * hidden_m0() + hidden_m1() + hidden_m2(); }
  /// Basis rows predicted by the readout.
  std::size_t coefficient_count() const { return basis.gaussians() + (use_background ? 1 : 0); }
  spectra::BasisSpec effective_basis() const;

  /// Throws ConfigError when a field is out of range.
  void validate() const;

  /// Tiny configuration used by gradient checks.
  static ModelConfig tiny();
};

nlohmann::json to_json(const ModelConfig& c);
/// Overlays keys from `j` onto `base`. Unknown keys raise ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});

/// Standard score transform for the edge energy target.
struct ZScore {
  double mean = 0.0;
  double std = 1.0;

  static ZScore fit(std::span<const double> values);
  double forward(double x) const { return (x - mean) / std; }
  double inverse(double z) const { return z * std + mean; }
};

}  // namespace xane3::model
