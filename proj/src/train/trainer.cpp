#include "xane3/train/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "xane3/autodiff/ops.hpp"
#include "xane3/errors.hpp"
#include "xane3/model/checkpoint.hpp"

namespace xane3::train {

using nlohmann::json;

namespace {

double number(const json& v, const std::string& key) {
  if (!v.is_number()) throw ConfigError("train." + key + " must be a number");
  return v.get<double>();
}

std::size_t count(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
    throw ConfigError("train." + key + " must be a non-negative integer");
  }
  return v.get<std::size_t>();
}

objective::LossTerms terms_from(const objective::LossAccumulator& acc) { return acc.mean(); }

double weighted(const objective::LossTerms& t, const objective::EffectiveWeights& w) {
  return t.spec + w.grad * t.grad + w.curv * t.curv + w.e0 * t.e0;
}

// Targets of a batch in member order: (G, n) spectra and (G, 1) z-scored E0.
std::pair<ad::Tensor, ad::Tensor> targets(const PreparedData& data, std::span<const std::size_t> idx,
                                          const model::ZScore& norm) {
  const std::size_t n = data.spectra[idx[0]].size();
  std::vector<double> y, e;
  y.reserve(idx.size() * n);
  for (auto i : idx) {
    y.insert(y.end(), data.spectra[i].begin(), data.spectra[i].end());
    e.push_back(norm.forward(data.e0[i]));
  }
  return {ad::Tensor::from({idx.size(), n}, std::move(y)), ad::Tensor::from({idx.size(), 1}, std::move(e))};
}

graph::Batch batch_of(const PreparedData& data, std::span<const std::size_t> idx) {
  std::vector<const graph::AtomicGraph*> gs;
  gs.reserve(idx.size());
  for (auto i : idx) gs.push_back(&data.graphs[i]);
  return graph::make_batch(gs);
}

json terms_json(const objective::LossTerms& t) {
  return {{"loss_spec", t.spec}, {"loss_grad", t.grad}, {"loss_curv", t.curv}, {"loss_e0", t.e0}};
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw ConfigError("train.lr0 must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("train.weight_decay must be non-negative");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train betas must lie in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be positive");
  if (!(plateau_factor > 0 && plateau_factor < 1)) throw ConfigError("train.plateau_factor must lie in (0, 1)");
  if (plateau_patience == 0) throw ConfigError("train.plateau_patience must be positive");
  if (!(min_lr > 0 && min_lr <= lr0)) throw ConfigError("train.min_lr must be positive and at most lr0");
  if (max_epochs == 0) throw ConfigError("train.max_epochs must be positive");
  double total = 0;
  for (double f : split) {
    if (!(f >= 0)) throw ConfigError("train.split fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("train.split fractions must sum to 1");
  if (!(divergence_factor > 1)) throw ConfigError("train.divergence_factor must exceed 1");
  if (divergence_patience == 0) throw ConfigError("train.divergence_patience must be positive");
}

json to_json(const TrainConfig& c) {
  return json{{"lr0", c.lr0},
              {"weight_decay", c.weight_decay},
              {"batch_size", c.batch_size},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"plateau_factor", c.plateau_factor},
              {"plateau_patience", c.plateau_patience},
              {"min_lr", c.min_lr},
              {"max_epochs", c.max_epochs},
              {"seed", c.seed},
              {"split", c.split},
              {"divergence_factor", c.divergence_factor},
              {"divergence_patience", c.divergence_patience}};
}

TrainConfig train_config_from_json(const json& j, const TrainConfig& base) {
  if (!j.is_object()) throw ConfigError("train config must be an object");
  TrainConfig c = base;
  for (const auto& [key, v] : j.items()) {
    if (key == "lr0") {
      c.lr0 = number(v, key);
    } else if (key == "weight_decay") {
      c.weight_decay = number(v, key);
    } else if (key == "batch_size") {
      c.batch_size = count(v, key);
    } else if (key == "beta1") {
      c.beta1 = number(v, key);
    } else if (key == "beta2") {
      c.beta2 = number(v, key);
    } else if (key == "adam_eps") {
      c.adam_eps = number(v, key);
    } else if (key == "plateau_factor") {
      c.plateau_factor = number(v, key);
    } else if (key == "plateau_patience") {
      c.plateau_patience = count(v, key);
    } else if (key == "min_lr") {
      c.min_lr = number(v, key);
    } else if (key == "max_epochs") {
      c.max_epochs = count(v, key);
    } else if (key == "seed") {
      c.seed = count(v, key);
    } else if (key == "split") {
      if (!v.is_array() || v.size() != 3) throw ConfigError("train.split must be an array of 3 numbers");
      for (std::size_t i = 0; i < 3; ++i) c.split[i] = number(v[i], "split");
    } else if (key == "divergence_factor") {
      c.divergence_factor = number(v, key);
    } else if (key == "divergence_patience") {
      c.divergence_patience = count(v, key);
    } else {
      throw ConfigError("unknown key train." + key);
    }
  }
  c.validate();
  return c;
}

void RunConfig::validate() const {
  train.validate();
  model.validate();
  loss.validate();
}

json to_json(const RunConfig& c) {
  return json{{"data", c.data}, {"train", to_json(c.train)}, {"model", model::to_json(c.model)},
              {"loss", objective::to_json(c.loss)}};
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "data") {
      if (!v.is_string()) throw ConfigError("data must be a string path");
      c.data = v.get<std::string>();
    } else if (key == "train") {
      c.train = train_config_from_json(v);
    } else if (key == "model") {
      c.model = model::model_config_from_json(v);
    } else if (key == "loss") {
      c.loss = objective::loss_weights_from_json(v);
    } else {
      throw ConfigError("unknown run config section '" + key + "'");
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open run config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed run config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json root = to_json(c);
  json* node = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown config key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = value;
  c = run_config_from_json(root);
}

const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> names{"baseline",     "no_derivative_loss", "no_background",
                                              "no_gated_residual", "mean_pooling",  "no_layernorm",
                                              "scalar_only",  "single_scale_basis"};
  return names;
}

void apply_ablation(RunConfig& c, const std::string& name) {
  if (name == "baseline") {
  } else if (name == "no_derivative_loss") {
    c.loss.lambda_grad = 0.0;
    c.loss.lambda_curv = 0.0;
  } else if (name == "no_background") {
    c.model.use_background = false;
  } else if (name == "no_gated_residual") {
    c.model.use_gated_residual = false;
  } else if (name == "mean_pooling") {
    c.model.use_attention_pool = false;
  } else if (name == "no_layernorm") {
    c.model.use_layernorm = false;
  } else if (name == "scalar_only") {
    c.model.scalar_only = true;
  } else if (name == "single_scale_basis") {
    c.model.basis.per_scale *= c.model.basis.scales.size();
    c.model.basis.scales = {1.0};
  } else {
    throw ConfigError("unknown ablation '" + name + "'");
  }
  c.validate();
}

AdamW::AdamW(ad::ParamStore& params, const TrainConfig& config, std::function<bool(const std::string&)> no_decay)
    : params_(params),
      beta1_(config.beta1),
      beta2_(config.beta2),
      eps_(config.adam_eps),
      weight_decay_(config.weight_decay) {
  for (const auto& e : params_.entries()) {
    decay_.push_back(!(no_decay && no_decay(e.name)));
    m_.emplace_back(e.tensor.numel(), 0.0);
    v_.emplace_back(e.tensor.numel(), 0.0);
  }
}

void AdamW::step(double lr) {
  auto& entries = params_.entries();
  if (entries.size() != m_.size()) throw ValueError("AdamW: parameter store changed size");
  std::vector<std::vector<double>> grads;
  grads.reserve(entries.size());
  for (const auto& e : entries) {
    grads.push_back(e.tensor.grad());
    for (double g : grads.back()) {
      if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient in parameter '" + e.name + "'");
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < entries.size(); ++p) {
    auto w = entries[p].tensor.mutable_data();
    const auto& g = grads[p];
    auto& m = m_[p];
    auto& v = v_[p];
    const double shrink = decay_[p] ? 1.0 - lr * weight_decay_ : 1.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] *= shrink;
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

PlateauScheduler::PlateauScheduler(double lr0, double factor, std::size_t patience, double min_lr)
    : lr_(lr0), factor_(factor), min_lr_(min_lr), patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  if (!(factor > 0 && factor < 1)) throw ConfigError("plateau factor must lie in (0, 1)");
  if (patience == 0) throw ConfigError("plateau patience must be positive");
  if (!(min_lr > 0 && min_lr <= lr0)) throw ConfigError("min_lr must be positive and at most the initial lr");
}

double PlateauScheduler::step(double metric) {
  if (metric < best_) {
    best_ = metric;
    bad_ = 0;
  } else if (++bad_ >= patience_) {
    lr_ = std::max(min_lr_, lr_ * factor_);
    bad_ = 0;
  }
  return lr_;
}

bool DivergenceGuard::update(double metric) {
  if (!has_reference_ && std::isfinite(metric)) {
    reference_ = metric;
    has_reference_ = true;
    return false;
  }
  const bool over = !std::isfinite(metric) || metric > factor_ * reference_;
  over_ = over ? over_ + 1 : 0;
  return over_ >= patience_;
}

Split split_dataset(const std::vector<graph::Record>& records, std::uint64_t seed, const std::array<double, 3>& fractions) {
  TrainConfig check;
  check.split = fractions;
  check.validate();
  const std::size_t n = records.size();
  if (n < 10) throw ValueError("split_dataset needs at least 10 records, got " + std::to_string(n));

  std::vector<std::vector<std::size_t>> groups;
  std::map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < n; ++i) {
    auto [it, fresh] = slot.emplace(graph::structure_key(records[i].structure), groups.size());
    if (fresh) groups.emplace_back();
    groups[it->second].push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(groups.begin(), groups.end(), rng);

  const auto quota = [n](double f) { return static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9)); };
  const std::size_t n_val = quota(fractions[1]), n_test = quota(fractions[2]);
  Split s;
  for (const auto& g : groups) {
    auto& dst = s.test.size() + g.size() <= n_test ? s.test : s.val.size() + g.size() <= n_val ? s.val : s.train;
    dst.insert(dst.end(), g.begin(), g.end());
  }
  if ((n_val > 0 && s.val.empty()) || (n_test > 0 && s.test.empty())) {
    throw ValueError("split_dataset: structure groups are too large to fill the validation and test splits");
  }
  return s;
}

PreparedData prepare(const model::Model& model, const std::vector<graph::Record>& records) {
  const std::size_t n = model.config().grid.n;
  PreparedData d;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    if (r.spectrum.size() != n) {
      throw ShapeError("record " + std::to_string(i) + " has " + std::to_string(r.spectrum.size()) +
                       " spectrum points, the model grid has " + std::to_string(n));
    }
    d.graphs.push_back(model.prepare(r.structure, r.absorber()));
    d.spectra.push_back(r.spectrum);
    d.e0.push_back(r.e0);
    d.group.push_back(graph::structure_key(r.structure));
  }
  return d;
}

objective::LossTerms evaluate(const model::Model& model, const PreparedData& data, const std::vector<std::size_t>& indices,
                              const model::ZScore& e0_norm, std::size_t batch_size) {
  if (indices.empty()) throw ValueError("evaluate: no records");
  if (batch_size == 0) throw ConfigError("evaluate: batch size must be positive");
  ad::NoGradGuard guard;
  objective::LossAccumulator acc;
  for (std::size_t b = 0; b < indices.size(); b += batch_size) {
    const std::span<const std::size_t> idx(indices.data() + b, std::min(batch_size, indices.size() - b));
    auto out = model.forward(batch_of(data, idx));
    auto [y, e] = targets(data, idx, e0_norm);
    acc.add(objective::composite_loss(out.spectrum, y, out.e0, e, {}, model.config().grid).terms, idx.size());
  }
  return terms_from(acc);
}

json to_json(const EpochMetrics& m) {
  json j{{"epoch", m.epoch}, {"split", m.split}, {"loss_total", m.loss_total}};
  j.update(terms_json(m.terms));
  j["lr"] = m.lr;
  return j;
}

std::string table_report(const std::vector<std::pair<std::string, objective::LossTerms>>& rows) {
  std::size_t width = 8;
  for (const auto& [name, t] : rows) width = std::max(width, name.size());
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s %10s %10s %10s %10s %10s   (test, x1e-3)\n", static_cast<int>(width), "run",
                "spectrum", "gradient", "curvature", "total", "E0");
  out << buf;
  for (const auto& [name, t] : rows) {
    std::snprintf(buf, sizeof buf, "%-*s %10.4f %10.4f %10.4f %10.4f %10.4f\n", static_cast<int>(width), name.c_str(),
                  t.spec * 1e3, t.grad * 1e3, t.curv * 1e3, t.spectral_total() * 1e3, t.e0 * 1e3);
    out << buf;
  }
  return out.str();
}

TrainResult train_loop(const RunConfig& config, model::Model& model, const std::vector<graph::Record>& records,
                       const TrainOptions& options) {
  config.validate();
  const auto& tc = config.train;
  TrainResult result;
  result.split = split_dataset(records, tc.seed, tc.split);
  if (result.split.val.empty() || result.split.test.empty()) {
    throw ConfigError("training needs non-empty validation and test splits");
  }
  const PreparedData data = prepare(model, records);
  std::vector<double> train_e0;
  for (auto i : result.split.train) train_e0.push_back(data.e0[i]);
  result.e0_norm = model::ZScore::fit(train_e0);

  // Absorbers of one structure stay adjacent so a batch shares their backbone.
  std::vector<std::vector<std::size_t>> groups;
  {
    std::map<std::string, std::size_t> slot;
    for (auto i : result.split.train) {
      auto [it, fresh] = slot.emplace(data.group[i], groups.size());
      if (fresh) groups.emplace_back();
      groups[it->second].push_back(i);
    }
  }

  std::ofstream metrics;
  if (!options.out.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(options.out, ec);
    if (ec) throw IoError("cannot create " + options.out.string() + ": " + ec.message());
    metrics.open(options.out / "metrics.jsonl", std::ios::trunc);
    if (!metrics) throw IoError("cannot write " + (options.out / "metrics.jsonl").string());
  }

  AdamW opt(model.params(), tc);
  PlateauScheduler sched(tc.lr0, tc.plateau_factor, tc.plateau_patience, tc.min_lr);
  DivergenceGuard guard(tc.divergence_factor, tc.divergence_patience);
  std::mt19937_64 shuffle_rng(tc.seed + 2), dropout_rng(tc.seed + 3);
  const auto final_weights = objective::anneal_weight(std::numeric_limits<double>::max(), config.loss);
  const auto& grid = model.config().grid;

  std::vector<double> best_params = model.params().flatten();
  result.best_val = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 0; epoch < tc.max_epochs; ++epoch) {
    const double lr = sched.lr();
    const auto w = objective::anneal_weight(static_cast<double>(epoch), config.loss);
    std::shuffle(groups.begin(), groups.end(), shuffle_rng);
    std::vector<std::size_t> order;
    for (const auto& g : groups) order.insert(order.end(), g.begin(), g.end());

    objective::LossAccumulator acc;
    double total = 0.0;
    for (std::size_t b = 0; b < order.size(); b += tc.batch_size) {
      const std::span<const std::size_t> idx(order.data() + b, std::min(tc.batch_size, order.size() - b));
      const auto batch = batch_of(data, idx);
      auto [y, e] = targets(data, idx, result.e0_norm);
      model.params().zero_grad();
      model::ForwardOptions fo;
      fo.train = true;
      fo.rng = &dropout_rng;
      auto out = model.forward(batch, fo);
      auto loss = objective::composite_loss(out.spectrum, y, out.e0, e, w, grid);
      ad::backprop(loss.total);
      opt.step(lr);
      acc.add(loss.terms, idx.size());
      total += loss.total.item() * static_cast<double>(idx.size());
    }

    EpochMetrics tm{epoch, "train", terms_from(acc), total / static_cast<double>(order.size()), lr};
    EpochMetrics vm{epoch, "val", evaluate(model, data, result.split.val, result.e0_norm, tc.batch_size), 0.0, lr};
    vm.loss_total = weighted(vm.terms, w);
    result.history.push_back(tm);
    result.history.push_back(vm);
    result.epochs_run = epoch + 1;
    if (metrics.is_open()) {
      metrics << to_json(tm).dump() << '\n' << to_json(vm).dump() << '\n';
      metrics.flush();
    }
    if (options.on_epoch) options.on_epoch(tm, vm);

    // Model selection and scheduling use the objective at its final weights,
    // which stays comparable across the annealing ramp.
    const double selection = weighted(vm.terms, final_weights);
    if (selection < result.best_val) {
      result.best_val = selection;
      result.best_epoch = epoch;
      result.val = vm.terms;
      best_params = model.params().flatten();
      if (!options.out.empty()) {
        json extra{{"best_epoch", epoch}, {"val", terms_json(vm.terms)}, {"seed", tc.seed}};
        model::save_checkpoint(options.out / "best", model, result.e0_norm, extra);
      }
    }
    if (guard.update(selection)) {
      throw DivergedError("validation objective stayed above " + std::to_string(tc.divergence_factor) + "x its first value (" +
                          std::to_string(guard.reference()) + ") for " + std::to_string(tc.divergence_patience) +
                          " epochs at epoch " + std::to_string(epoch));
    }
    sched.step(selection);
  }

  model.params().assign(best_params);
  result.test = evaluate(model, data, result.split.test, result.e0_norm, tc.batch_size);
  return result;
}

TrainResult train_run(const RunConfig& config, const std::vector<graph::Record>& records, const TrainOptions& options,
                      std::unique_ptr<model::Model>* trained) {
  config.validate();
  auto model = std::make_unique<model::Model>(config.model, config.train.seed + 1);
  auto result = train_loop(config, *model, records, options);
  if (trained) *trained = std::move(model);
  return result;
}

}  // namespace xane3::train
