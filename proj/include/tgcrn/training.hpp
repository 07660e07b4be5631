#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tgcrn/data.hpp"
#include "tgcrn/model.hpp"

namespace tgcrn {

using numerics::GradientMap;

struct TrainConfig {
  double lr0 = 1e-3;
  double decay = 0.3;
  std::vector<std::size_t> decay_epochs{5, 20, 40, 70, 90};
  double weight_decay = 1e-4;
  std::size_t batch_size = 16;
  std::size_t patience = 15;
  std::size_t max_epochs = 100;
  std::optional<double> grad_clip = 5.0;  // global norm; nullopt disables
  std::uint64_t seed = 1;

  void validate() const;
  /// Rate used during `epoch` (1-based).
  double lr_at(std::size_t epoch) const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& path = "train");

// ---------------------------------------------------------------------------
// Adam

struct AdamSlot {
  Tensor m, v;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::vector<AdamSlot> slots;  // parallel to the parameter list
};

/// One Adam update with the L2 term `weight_decay · θ` added to each gradient
/// (after multiplying the raw gradient by `grad_scale`). Parameters without a
/// gradient entry see a zero gradient. A non-finite gradient throws
/// NumericError naming the parameter, before anything changes.
void adam_step(std::span<Parameter* const> params, const GradientMap& grads, AdamState& state,
               double lr, double weight_decay, double grad_scale = 1.0);

/// Global L2 norm over every gradient in the map.
double gradient_norm(const GradientMap& grads);
/// Factor that brings `norm` down to `max_norm` (1 when already below).
double clip_scale(double norm, double max_norm);

/// Counts validation epochs without improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Records one validation score (lower is better). Returns true when it
  /// is a new best.
  bool update(double score);
  bool should_stop() const { return bad_epochs_ >= patience_; }
  double best() const { return best_; }
  std::size_t bad_epochs() const { return bad_epochs_; }

 private:
  std::size_t patience_;
  std::size_t bad_epochs_ = 0;
  double best_ = 0;
  bool seen_ = false;
};

// ---------------------------------------------------------------------------
// Metrics

inline constexpr double kMapeFloor = 1e-3;

struct Metrics {
  double mae = 0, rmse = 0, mse = 0, mape = 0, pcc = 0;
};

struct MetricsReport {
  std::vector<Metrics> per_horizon;
  Metrics average;  // over every entry of every horizon step
};

/// `truth` and `prediction` are [B, Q, N, d] in original units.
MetricsReport compute_metrics(const Tensor& truth, const Tensor& prediction);
/// Metrics over flat value lists.
Metrics compute_metrics(std::span<const double> truth, std::span<const double> prediction);

nlohmann::json to_json(const Metrics& m);
/// CSV with header variant,horizon,MAE,RMSE,MAPE,MSE,PCC; horizon "avg" for the average row.
std::string metrics_csv(const std::vector<std::pair<std::string, MetricsReport>>& rows);

// ---------------------------------------------------------------------------
// Training

/// Window starts per evaluation batch. Fixed so that evaluation results do
/// not depend on the training batch size.
inline constexpr std::size_t kEvalBatch = 64;

/// Forecasts for every window in `starts`, [S, Q, N, d_out], original units.
Tensor predict_windows(const Model& model, const Dataset& ds, const Normalizer& norm,
                       std::span<const std::size_t> starts);

/// Throws ContractError on an empty split.
MetricsReport evaluate(const Model& model, const Dataset& ds, const Normalizer& norm,
                       std::span<const std::size_t> starts);

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_error = 0;  // mean L_error over batches
  double train_time = 0;   // mean L_time over batches
  double train_total = 0;
  Metrics val;
  bool improved = false;
};

nlohmann::json to_json(const EpochRecord& r);

struct FitResult {
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  double best_val_mae = 0;
  bool diverged = false;
  std::string divergence;  // message when diverged
};

/// Trains `model` in place and leaves it holding the parameters with the
/// best validation MAE. `on_epoch` (optional) runs after every epoch.
FitResult fit(Model& model, const Dataset& ds, const Splits& splits, const Normalizer& norm,
              const TrainConfig& cfg,
              const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Writes one JSON object per line.
std::string history_jsonl(const std::vector<EpochRecord>& history);

// ---------------------------------------------------------------------------
// Ablation suite

/// Variant names in table order.
const std::vector<std::string>& ablation_variants();

struct AblationResult {
  std::string variant;
  FitResult fit;
  MetricsReport test;
  Model model;
};

/// Trains every listed variant from `base` with identical seeds and data.
std::vector<AblationResult> run_ablation(const std::vector<std::string>& variants,
                                         const ModelConfig& base, const TrainConfig& train,
                                         const Dataset& ds, const Splits& splits,
                                         const Normalizer& norm);

}  // namespace tgcrn
