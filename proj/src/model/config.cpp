#include "xane3/model/config.hpp"

#include <cmath>
#include <string>

#include "xane3/errors.hpp"

namespace xane3::model {

using nlohmann::json;

spectra::BasisSpec ModelConfig::effective_basis() const {
  spectra::BasisSpec b = basis;
  b.background = use_background;
  return b;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v < 1) throw ConfigError(std::string("model.") + name + " must be >= 1");
  };
  positive(layers, "layers");
  positive(hidden_m0(), scalar_only ? "scalar_only_m0" : "m0");
  positive(radial_count, "radial_count");
  positive(readout_hidden, "readout_hidden");
  positive(attention_hidden, "attention_hidden");
  positive(gate_hidden, "gate_hidden");
  positive(e0_hidden, "e0_hidden");
  if (!(r_max > 0) || !std::isfinite(r_max)) throw ConfigError("model.r_max must be positive");
  if (!(dropout >= 0 && dropout < 1)) throw ConfigError("model.dropout must be in [0, 1)");
  try {
    basis.validate();
    grid.validate();
  } catch (const ValueError& e) {
    throw ConfigError(e.what());
  }
}

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.layers = 2;
  c.m0 = 4;
  c.m1 = 2;
  c.m2 = 1;
  c.basis.per_scale = 5;
  c.basis.scales = {1.0, 2.0};
  c.grid.n = 8;
  return c;
}

namespace {

const char* radial_name(RadialKind k) { return k == RadialKind::Bessel ? "bessel" : "gaussian"; }

template <typename T>
void read(const json& j, const char* key, T& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("model.") + key + " has the wrong type");
  }
}

void check_keys(const json& j, std::initializer_list<const char*> known, const std::string& prefix) {
  if (!j.is_object()) throw ConfigError(prefix + " must be an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown config key '" + prefix + "." + key + "'");
  }
}

}  // namespace

json to_json(const ModelConfig& c) {
  return json{{"layers", c.layers},
              {"m0", c.m0},
              {"m1", c.m1},
              {"m2", c.m2},
              {"radial_count", c.radial_count},
              {"radial_kind", radial_name(c.radial_kind)},
              {"r_max", c.r_max},
              {"readout_hidden", c.readout_hidden},
              {"attention_hidden", c.attention_hidden},
              {"gate_hidden", c.gate_hidden},
              {"e0_hidden", c.e0_hidden},
              {"dropout", c.dropout},
              {"use_layernorm", c.use_layernorm},
              {"use_gated_residual", c.use_gated_residual},
              {"use_attention_pool", c.use_attention_pool},
              {"use_background", c.use_background},
              {"scalar_only", c.scalar_only},
              {"scalar_only_m0", c.scalar_only_m0},
              {"receptive_crop", c.receptive_crop},
              {"basis",
               {{"per_scale", c.basis.per_scale},
                {"scales", c.basis.scales},
                {"bg_center", c.basis.bg_center},
                {"bg_width", c.basis.bg_width}}},
              {"grid", {{"e_min", c.grid.e_min}, {"e_max", c.grid.e_max}, {"n", c.grid.n}}}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  check_keys(j,
             {"layers", "m0", "m1", "m2", "radial_count", "radial_kind", "r_max", "readout_hidden", "attention_hidden",
              "gate_hidden", "e0_hidden", "dropout", "use_layernorm", "use_gated_residual", "use_attention_pool",
              "use_background", "scalar_only", "scalar_only_m0", "receptive_crop", "basis", "grid"},
             "model");
  read(j, "layers", c.layers);
  read(j, "m0", c.m0);
  read(j, "m1", c.m1);
  read(j, "m2", c.m2);
  read(j, "radial_count", c.radial_count);
  if (auto it = j.find("radial_kind"); it != j.end()) {
    const auto name = it->get<std::string>();
    if (name == "bessel") {
      c.radial_kind = RadialKind::Bessel;
    } else if (name == "gaussian") {
      c.radial_kind = RadialKind::Gaussian;
    } else {
      throw ConfigError("model.radial_kind must be 'bessel' or 'gaussian', got '" + name + "'");
    }
  }
  read(j, "r_max", c.r_max);
  read(j, "readout_hidden", c.readout_hidden);
  read(j, "attention_hidden", c.attention_hidden);
  read(j, "gate_hidden", c.gate_hidden);
  read(j, "e0_hidden", c.e0_hidden);
  read(j, "dropout", c.dropout);
  read(j, "use_layernorm", c.use_layernorm);
  read(j, "use_gated_residual", c.use_gated_residual);
  read(j, "use_attention_pool", c.use_attention_pool);
  read(j, "use_background", c.use_background);
  read(j, "scalar_only", c.scalar_only);
  read(j, "scalar_only_m0", c.scalar_only_m0);
  read(j, "receptive_crop", c.receptive_crop);
  if (auto it = j.find("basis"); it != j.end()) {
    check_keys(*it, {"per_scale", "scales", "bg_center", "bg_width"}, "model.basis");
    read(*it, "per_scale", c.basis.per_scale);
    read(*it, "scales", c.basis.scales);
    read(*it, "bg_center", c.basis.bg_center);
    read(*it, "bg_width", c.basis.bg_width);
  }
  if (auto it = j.find("grid"); it != j.end()) {
    check_keys(*it, {"e_min", "e_max", "n"}, "model.grid");
    read(*it, "e_min", c.grid.e_min);
    read(*it, "e_max", c.grid.e_max);
    read(*it, "n", c.grid.n);
  }
  c.validate();
  return c;
}

ZScore ZScore::fit(std::span<const double> values) {
  if (values.empty()) throw ValueError("ZScore::fit needs at least one value");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  ZScore z;
  z.mean = mean;
  z.std = var > 1e-24 ? std::sqrt(var) : 1.0;
  return z;
}

}  // namespace xane3::model
