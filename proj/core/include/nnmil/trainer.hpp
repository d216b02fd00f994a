#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "nnmil/aggregator.hpp"
#include "nnmil/data_model.hpp"
#include "nnmil/fingerprint.hpp"

namespace nnmil {

/// Linear warmup from lr/warmup, then cosine decay to 0 at max_epochs.
double lr_schedule(std::size_t epoch, const RunConfig& config);

template <typename T>
struct OptimizerState {
  AggregatorParams<T> m;
  AggregatorParams<T> v;
  std::uint64_t step = 0;

  static OptimizerState zeros_like(const AggregatorParams<T>& params) {
    return {params.zeros_like(), params.zeros_like(), 0};
  }
  friend bool operator==(const OptimizerState&, const OptimizerState&) = default;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// One AdamW update in place: decoupled decay theta *= (1 - lr wd), then the
/// bias-corrected adaptive step. Throws ValidationError naming the first
/// tensor with a non-finite gradient (nothing is modified in that case).
template <typename T>
void adamw_step(AggregatorParams<T>& params, const Gradients<T>& grads, OptimizerState<T>& state,
                double lr, const AdamConfig& adam);

/// Stops once `patience` epochs pass without a strict improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Returns true when training should stop after this epoch. NaN losses
  /// never count as improvements.
  bool observe(std::size_t epoch, double loss);

  std::optional<std::size_t> best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  std::size_t patience_;
  std::optional<std::size_t> best_epoch_;
  double best_loss_ = std::numeric_limits<double>::infinity();
  std::size_t last_epoch_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // NaN when undefined (e.g. no validation events)
  double learning_rate = 0.0;
  std::size_t steps = 0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::size_t stopped_epoch = 0;
  std::optional<std::size_t> best_epoch;
  double best_val_loss = std::numeric_limits<double>::quiet_NaN();
  std::string checkpoint_path;
  std::vector<std::string> notes;
};

void to_json(nlohmann::json& j, const TrainReport& report);

struct Checkpoint {
  AggregatorParams<float> params;
  OptimizerState<float> optimizer;
  RunConfig config;
};

/// "NNMILCK1", u64 LE metadata length, JSON metadata (tensor name -> shape
/// and byte offset, the RunConfig, the optimizer step), then float32 LE
/// payloads: parameters followed by the m_ and v_ moment tensors.
std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct TrainOptions {
  /// Written when set; the report records the path.
  std::optional<std::filesystem::path> checkpoint_path;
  /// Ends the run after this many epochs without altering the learning-rate
  /// schedule, which still spans config.max_epochs.
  std::optional<std::size_t> epoch_budget;
  /// Per-epoch progress callback.
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  Checkpoint checkpoint;
  TrainReport report;
};

/// Trains on the train split, early-stopping on validation loss computed
/// from the chunk-ensemble outputs. The returned weights are those of the
/// last epoch run.
TrainResult train(const RunConfig& config, const DatasetManifest& manifest, std::span<const SlideBag> bags,
                  const TrainOptions& options = {});

/// Validation loss of the chunk ensemble over the given indices.
double ensemble_loss(const AggregatorParams<float>& params, const RunConfig& config,
                     const DatasetManifest& manifest, std::span<const SlideBag> bags,
                     std::span<const std::size_t> indices);

}  // namespace nnmil
