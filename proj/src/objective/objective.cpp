#include "xane3/objective/objective.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "xane3/autodiff/ops.hpp"
#include "xane3/errors.hpp"

namespace xane3::objective {

using nlohmann::json;

void LossWeights::validate() const {
  for (double v : {lambda_grad, lambda_curv, lambda_e0}) {
    if (!(v >= 0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and non-negative");
  }
  if (!(anneal_start >= 0)) throw ConfigError("loss.anneal_start must be non-negative");
  if (!(anneal_len >= 0)) throw ConfigError("loss.anneal_len must be non-negative");
}

json to_json(const LossWeights& w) {
  return json{{"lambda_grad", w.lambda_grad},
              {"lambda_curv", w.lambda_curv},
              {"lambda_e0", w.lambda_e0},
              {"anneal_start", w.anneal_start},
              {"anneal_len", w.anneal_len}};
}

LossWeights loss_weights_from_json(const json& j, const LossWeights& base) {
  if (!j.is_object()) throw ConfigError("loss config must be an object");
  LossWeights w = base;
  for (const auto& [key, value] : j.items()) {
    if (!value.is_number()) throw ConfigError("loss." + key + " must be a number");
    const double v = value.get<double>();
    if (key == "lambda_grad") {
      w.lambda_grad = v;
    } else if (key == "lambda_curv") {
      w.lambda_curv = v;
    } else if (key == "lambda_e0") {
      w.lambda_e0 = v;
    } else if (key == "anneal_start") {
      w.anneal_start = v;
    } else if (key == "anneal_len") {
      w.anneal_len = v;
    } else {
      throw ConfigError("unknown key loss." + key);
    }
  }
  w.validate();
  return w;
}

EffectiveWeights anneal_weight(double epoch, const LossWeights& w) {
  if (!(epoch >= 0)) throw ValueError("anneal_weight: epoch must be non-negative");
  double ramp;
  if (w.anneal_len <= 0) {
    ramp = epoch >= w.anneal_start ? 1.0 : 0.0;
  } else {
    ramp = std::clamp((epoch - w.anneal_start) / w.anneal_len, 0.0, 1.0);
  }
  return {w.lambda_grad * ramp, w.lambda_curv * ramp, w.lambda_e0};
}

LossResult composite_loss(const ad::Tensor& pred, const ad::Tensor& target, const ad::Tensor& pred_e0,
                          const ad::Tensor& target_e0, const EffectiveWeights& weights,
                          const spectra::SpectrumGrid& grid) {
  grid.validate();
  if (pred.rank() != 2 || pred.shape() != target.shape() || pred.dim(1) != grid.n) {
    throw ShapeError("composite_loss: spectra " + ad::to_string(pred.shape()) + " and " +
                     ad::to_string(target.shape()) + " are not both on the " + std::to_string(grid.n) +
                     "-point grid");
  }
  const std::size_t graphs = pred.dim(0);
  if (graphs == 0) throw ValueError("composite_loss: empty batch");
  if (pred_e0.shape() != ad::Shape{graphs, 1} || target_e0.shape() != ad::Shape{graphs, 1}) {
    throw ShapeError("composite_loss: E0 values must be (" + std::to_string(graphs) + ", 1)");
  }

  const auto diff = ad::sub(pred, target);
  // Finite differences are linear, so differentiating the residual equals the
  // residual of the derivatives.
  const auto [d1, d2] = spectra::finite_derivatives(diff, grid);
  const auto l_spec = ad::mean(ad::square(diff));
  const auto l_grad = ad::mean(ad::square(d1));
  const auto l_curv = ad::mean(ad::square(d2));
  const auto l_e0 = ad::mean(ad::abs(ad::sub(pred_e0, target_e0)));

  auto total = l_spec;
  if (weights.grad != 0) total = ad::add(total, ad::scale(l_grad, weights.grad));
  if (weights.curv != 0) total = ad::add(total, ad::scale(l_curv, weights.curv));
  if (weights.e0 != 0) total = ad::add(total, ad::scale(l_e0, weights.e0));

  LossResult r;
  r.total = total;
  r.terms = {l_spec.item(), l_grad.item(), l_curv.item(), l_e0.item()};
  return r;
}

void LossAccumulator::add(const LossTerms& batch, std::size_t graphs) {
  const double g = static_cast<double>(graphs);
  sum_.spec += batch.spec * g;
  sum_.grad += batch.grad * g;
  sum_.curv += batch.curv * g;
  sum_.e0 += batch.e0 * g;
  graphs_ += graphs;
}

LossTerms LossAccumulator::mean() const {
  if (graphs_ == 0) throw ValueError("LossAccumulator: no batches recorded");
  const double g = static_cast<double>(graphs_);
  return {sum_.spec / g, sum_.grad / g, sum_.curv / g, sum_.e0 / g};
}

}  // namespace xane3::objective
