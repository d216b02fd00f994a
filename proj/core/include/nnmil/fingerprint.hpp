#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "nnmil/data_model.hpp"
#include "nnmil/types.hpp"

namespace nnmil {

/// Dataset statistics over the train split; input to the configuration rules.
struct DataFingerprint {
  Task task = Task::classification;
  double patch_count_median = 0.0;
  double patch_count_iqr = 0.0;
  double patch_count_p5 = 0.0;
  double patch_count_p95 = 0.0;
  std::size_t embed_dim = 0;
  std::vector<double> class_prevalence;     // classification
  std::optional<double> target_min;         // regression
  std::optional<double> target_max;         // regression
  std::optional<double> event_rate;         // survival
  std::optional<double> time_horizon_max;   // survival
  std::optional<double> magnification;      // carried through, not used by any rule
  std::size_t n_train = 0;
  std::size_t n_val = 0;
  std::size_t n_test = 0;

  void validate() const;
};

DataFingerprint compute_fingerprint(const DatasetManifest& manifest,
                                    std::span<const BagShape> shapes);
DataFingerprint compute_fingerprint(const DatasetManifest& manifest,
                                    std::span<const SlideBag> bags);

/// Every hyperparameter of a run.
struct RunConfig {
  Task task = Task::classification;
  std::size_t embed_dim = 0;
  std::size_t n_outputs = 1;     // C for classification, 1 otherwise
  std::size_t bag_size = 1;      // M
  std::size_t hidden_dim = 1;    // H
  std::size_t stride = 1;        // S
  double dropout = 0.25;
  std::size_t batch_size = 32;   // B
  double learning_rate = 3e-4;
  double weight_decay = 1e-4;
  std::size_t warmup_epochs = 5;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  std::uint64_t seed = 42;
  std::size_t ensemble_chunks = 1;  // K = floor((D - H) / S) + 1
  TrainingMode training_mode = TrainingMode::nnmil;
  /// Explicit overrides applied on top of the rules, as given.
  nlohmann::json overrides = nlohmann::json::object();

  void validate() const;
};

/// floor((D - H) / S) + 1
std::size_t chunk_count(std::size_t embed_dim, std::size_t hidden_dim, std::size_t stride);

/// Applies the rule set to a fingerprint. Keys in `overrides` (RunConfig
/// field names) replace rule outputs and are recorded in the result.
RunConfig derive_config(const DataFingerprint& fp, Task task,
                        const nlohmann::json& overrides = nlohmann::json::object());

void to_json(nlohmann::json& j, const DataFingerprint& fp);
void from_json(const nlohmann::json& j, DataFingerprint& fp);
void to_json(nlohmann::json& j, const RunConfig& cfg);
void from_json(const nlohmann::json& j, RunConfig& cfg);

}  // namespace nnmil
