#pragma once

#include <cstddef>

#include "json.hpp"
#include "xane3/autodiff/tensor.hpp"
#include "xane3/spectra/spectra.hpp"

namespace xane3::objective {

/// Final loss weights and the linear ramp applied to the derivative terms.
struct LossWeights {
  double lambda_grad = 1.0;
  double lambda_curv = 1.0;
  double lambda_e0 = 0.1;
  double anneal_start = 20.0;  // epoch at which the ramp begins
  double anneal_len = 15.0;    // epochs to reach the final weights

  void validate() const;
};

nlohmann::json to_json(const LossWeights& w);
/// Overlay keys of `j` on `base`; unknown keys raise ConfigError.
LossWeights loss_weights_from_json(const nlohmann::json& j, const LossWeights& base = {});

struct EffectiveWeights {
  double grad = 0.0;
  double curv = 0.0;
  double e0 = 0.0;
};

/// Derivative weights at `epoch` (zero before the ramp, final after it).
/// The E0 weight is never annealed.
EffectiveWeights anneal_weight(double epoch, const LossWeights& w);

/// Unweighted per-term values.
struct LossTerms {
  double spec = 0.0;
  double grad = 0.0;
  double curv = 0.0;
  double e0 = 0.0;

  /// Spectrum, gradient and curvature MSEs at unit weight; E0 is excluded.
  double spectral_total() const { return spec + grad + curv; }
};

struct LossResult {
  ad::Tensor total;  // weighted scalar to back-propagate
  LossTerms terms;
};

/// Composite loss over a batch. `pred` and `target` are (G, n) spectra on
/// `grid`; `pred_e0` and `target_e0` are (G, 1) z-scored edge energies.
/// Every term is a per-graph mean, then averaged over graphs.
LossResult composite_loss(const ad::Tensor& pred, const ad::Tensor& target, const ad::Tensor& pred_e0,
                          const ad::Tensor& target_e0, const EffectiveWeights& weights,
                          const spectra::SpectrumGrid& grid = {});

/// Graph-weighted running mean of per-batch terms.
class LossAccumulator {
 public:
  void add(const LossTerms& batch, std::size_t graphs);
  LossTerms mean() const;
  std::size_t graphs() const { return graphs_; }

 private:
  LossTerms sum_;
  std::size_t graphs_ = 0;
};

}  // namespace xane3::objective
