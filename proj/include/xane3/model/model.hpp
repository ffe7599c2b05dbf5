#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "xane3/autodiff/ops.hpp"
#include "xane3/autodiff/param_store.hpp"
#include "xane3/graph/graph.hpp"
#include "xane3/model/config.hpp"
#include "xane3/so3/so3.hpp"

namespace xane3::model {

inline constexpr std::size_t kEmbeddingRows = 119;
inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kNormGuard = 1e-12;

/// Radial features of one distance, each multiplied by the cosine cutoff.
std::vector<double> radial_basis(double d, std::size_t count, double r_cut, RadialKind kind);

/// Per-edge constants shared by every interaction block.
struct EdgeGeometry {
  std::size_t nodes = 0;
  std::vector<std::size_t> center;    // node receiving the message (edge source i)
  std::vector<std::size_t> neighbor;  // node sending its features (edge target j)
  ad::Tensor radial;                  // (E, radial_count)
  std::array<ad::Tensor, 3> sh;       // (E, 2l+1) at the unit edge vector
};

EdgeGeometry edge_geometry(const graph::Batch& batch, const ModelConfig& config);

struct Linear {
  ad::Tensor weight;  // (in, out)
  ad::Tensor bias;    // (1, out), may be undefined

  ad::Tensor operator()(const ad::Tensor& x) const;
};

struct TPPath {
  int l_in = 0, l_f = 0, l_out = 0;
};

/// All paths l_in x l_f -> l_out with l_out <= 2 allowed by the triangle and
/// parity rules for the given input and output multiplicities.
std::vector<TPPath> tp_paths(const std::array<std::size_t, 3>& in, const std::array<std::size_t, 3>& out);

/// Tensor product message with radial-generated path weights and mean
/// aggregation over incoming edges.
struct TensorProduct {
  std::array<std::size_t, 3> in{};
  std::array<std::size_t, 3> out{};
  std::vector<TPPath> paths;
  /// Per output order: (radial_count * sum of path input widths, out[l]).
  std::array<ad::Tensor, 3> weights;

  so3::EquivariantFeature operator()(const so3::EquivariantFeature& h, const EdgeGeometry& geo) const;
};

struct LayerNorm {
  std::array<ad::Tensor, 3> gamma;  // (1, m_l, 1)
  ad::Tensor beta0;                 // (1, m_0, 1)

  so3::EquivariantFeature operator()(const so3::EquivariantFeature& x) const;
};

/// SiLU on the leading m0 scalars, sigmoid gates from the trailing m1 + m2
/// scalars applied per channel to the l = 1 and l = 2 blocks.
so3::EquivariantFeature gate(const so3::EquivariantFeature& x, const std::array<std::size_t, 3>& hidden);

struct GatedResidual {
  std::array<ad::Tensor, 3> self;  // (m_l, m_l)
  ad::Tensor self_bias;            // (1, m_0, 1)
  Linear gate_in;                  // 2 m0 -> gate_hidden
  Linear gate_out;                 // gate_hidden -> m0 + m1 + m2
  bool gated = true;

  so3::EquivariantFeature operator()(const so3::EquivariantFeature& prev, const so3::EquivariantFeature& msg) const;
};

struct Block {
  TensorProduct tp;
  LayerNorm norm;
  bool has_residual = false;
  GatedResidual residual;
};

/// Per-graph bookkeeping derived from a Batch.
struct PoolIndex {
  std::size_t graphs = 0;
  std::vector<std::size_t> absorber_node, absorber_graph;
  std::vector<double> inv_absorbers;  // per graph
  std::vector<std::size_t> other_node, other_graph;
  std::vector<double> inv_others;  // per graph, 0 when a graph has no other atom
};

PoolIndex pool_index(const graph::Batch& batch);

/// Mean over absorbers of each graph: x is (N, C) -> (G, C).
ad::Tensor absorber_mean(const ad::Tensor& x, const PoolIndex& idx);

/// Per-channel norms sqrt(sum x^2 + 1e-12) averaged over absorbers: (N, m, d) -> (G, m).
ad::Tensor invariant_norms(const ad::Tensor& block, const PoolIndex& idx);

struct AttentionPool {
  Linear hidden;  // 2 m0 -> attention_hidden
  Linear score;   // attention_hidden -> 1, no bias

  /// Context per graph (G, m0) and the attention weights per non-absorber pair.
  std::pair<ad::Tensor, ad::Tensor> operator()(const ad::Tensor& s, const ad::Tensor& query,
                                              const PoolIndex& idx) const;
};

/// Unweighted mean of non-absorber scalars per graph.
ad::Tensor mean_pool(const ad::Tensor& s, const PoolIndex& idx);

struct ForwardOptions {
  bool train = false;
  std::mt19937_64* rng = nullptr;  // required for dropout when train is set
  bool keep_features = false;
};

struct ForwardResult {
  ad::Tensor spectrum;      // (G, n)
  ad::Tensor coefficients;  // (G, rows)
  ad::Tensor e0;            // (G, 1), z-scored
  ad::Tensor z;             // (G, readout_input)
  ad::Tensor attention;     // (pairs), undefined without attention pooling
  std::vector<so3::EquivariantFeature> features;  // embedding then each block, if kept
};

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed);
  // Layers hold handles into the parameter store, so copies would alias it.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  /// Graph for one absorber, cropped to the receptive field when enabled.
  graph::AtomicGraph prepare(const graph::Structure& s, std::size_t absorber) const;

  ForwardResult forward(const graph::Batch& batch, const ForwardOptions& options = {}) const;

  so3::EquivariantFeature embed(const std::vector<int>& numbers) const;

  /// Z-scored E0 from pooled invariants (G, readout_input) -> (G, 1). The
  /// forward pass feeds it detach(z), so the head never trains the encoder.
  ad::Tensor e0_head(const ad::Tensor& z) const;

  /// Parameter counts grouped by the first component of their names.
  std::vector<std::pair<std::string, std::size_t>> parameter_report() const;

  /// Names of parameters exempt from weight decay.
  static bool is_basis_parameter(const std::string& name);

 private:
  ModelConfig config_;
  ad::ParamStore params_;
  ad::Tensor embedding_;
  std::vector<Block> blocks_;
  AttentionPool attention_;
  Linear readout_hidden_, readout_out_;
  Linear e0_hidden_, e0_out_;
  spectra::BasisParams basis_;
};

}  // namespace xane3::model
