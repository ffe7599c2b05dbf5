#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xane3/autodiff/param_store.hpp"
#include "xane3/graph/dataset.hpp"
#include "xane3/model/config.hpp"
#include "xane3/model/model.hpp"
#include "xane3/objective/objective.hpp"

namespace xane3::train {

struct TrainConfig {
  double lr0 = 1e-3;
  double weight_decay = 0.01;
  std::size_t batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 10;
  double min_lr = 1e-5;
  std::size_t max_epochs = 300;
  std::uint64_t seed = 0;
  std::array<double, 3> split{0.8, 0.1, 0.1};
  /// Abort when the validation objective stays above this multiple of its
  /// first value for `divergence_patience` consecutive epochs.
  double divergence_factor = 10.0;
  std::size_t divergence_patience = 5;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j, const TrainConfig& base = {});

/// Everything one training run needs; serialized as a single JSON file.
struct RunConfig {
  TrainConfig train;
  model::ModelConfig model;
  objective::LossWeights loss;
  std::string data;  // JSON Lines dataset path

  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Apply one `dotted.key=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise; unknown keys raise ConfigError.
void apply_override(RunConfig& c, const std::string& assignment);

/// Names accepted by apply_ablation, starting with "baseline".
const std::vector<std::string>& ablation_names();
void apply_ablation(RunConfig& c, const std::string& name);

/// Decoupled-weight-decay Adam over every entry of a ParamStore.
class AdamW {
 public:
  AdamW(ad::ParamStore& params, const TrainConfig& config,
        std::function<bool(const std::string&)> no_decay = model::Model::is_basis_parameter);

  /// One update with the gradients currently stored on the parameters.
  /// Throws NonFiniteError naming the parameter when a gradient is not finite.
  void step(double lr);
  std::size_t steps() const { return t_; }

 private:
  ad::ParamStore& params_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::vector<bool> decay_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// epochs fail to improve on the best metric, never going below `min_lr`.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr0, double factor, std::size_t patience, double min_lr);

  /// Record one epoch's metric; returns the learning rate for the next epoch.
  double step(double metric);
  double lr() const { return lr_; }
  double best() const { return best_; }
  std::size_t bad_epochs() const { return bad_; }

 private:
  double lr_, factor_, min_lr_;
  std::size_t patience_;
  double best_;
  std::size_t bad_ = 0;
};

/// Tracks the validation objective against its first value.
class DivergenceGuard {
 public:
  DivergenceGuard(double factor, std::size_t patience) : factor_(factor), patience_(patience) {}

  /// Returns true once the metric has exceeded factor * first value (or is
  /// not finite) for `patience` consecutive calls.
  bool update(double metric);
  double reference() const { return reference_; }

 private:
  double factor_;
  std::size_t patience_;
  double reference_ = 0.0;
  bool has_reference_ = false;
  std::size_t over_ = 0;
};

struct Split {
  std::vector<std::size_t> train, val, test;
};

/// Shuffle structure groups (records sharing graph::structure_key) with
/// `seed` and fill test then validation up to floor(fraction * n) records;
/// the rest goes to training. Needs at least 10 records.
Split split_dataset(const std::vector<graph::Record>& records, std::uint64_t seed,
                    const std::array<double, 3>& fractions = {0.8, 0.1, 0.1});

/// Records prepared for a model: cropped graphs, targets and z-scored E0.
struct PreparedData {
  std::vector<graph::AtomicGraph> graphs;
  std::vector<std::vector<double>> spectra;
  std::vector<double> e0;  // raw eV
  std::vector<std::string> group;  // structure key per record
};

PreparedData prepare(const model::Model& model, const std::vector<graph::Record>& records);

/// Per-term losses of `indices` in eval mode, batched in order.
objective::LossTerms evaluate(const model::Model& model, const PreparedData& data, const std::vector<std::size_t>& indices,
                              const model::ZScore& e0_norm, std::size_t batch_size);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  objective::LossTerms terms;
  double loss_total = 0.0;
  double lr = 0.0;
};

nlohmann::json to_json(const EpochMetrics& m);

struct TrainResult {
  std::size_t epochs_run = 0;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  objective::LossTerms val;   // at the best epoch
  objective::LossTerms test;  // best parameters on the test split
  model::ZScore e0_norm;
  Split split;
  std::vector<EpochMetrics> history;
};

/// Test-set per-term MSEs in units of 1e-3, one row per run.
std::string table_report(const std::vector<std::pair<std::string, objective::LossTerms>>& rows);

struct TrainOptions {
  /// Checkpoint directory; the best-validation model goes to `<out>/best` and
  /// metrics to `<out>/metrics.jsonl`. Nothing is written when empty.
  std::filesystem::path out;
  /// Called after every epoch with that epoch's train and val metrics.
  std::function<void(const EpochMetrics& train, const EpochMetrics& val)> on_epoch;
};

/// Train `model` in place and leave it holding the best-validation parameters.
TrainResult train_loop(const RunConfig& config, model::Model& model, const std::vector<graph::Record>& records,
                       const TrainOptions& options = {});

/// Convenience: build the model from `config.model` seeded by the run seed, then train.
TrainResult train_run(const RunConfig& config, const std::vector<graph::Record>& records,
                      const TrainOptions& options = {}, std::unique_ptr<model::Model>* trained = nullptr);

}  // namespace xane3::train
