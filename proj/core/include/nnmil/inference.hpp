#pragma once

#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "nnmil/aggregator.hpp"
#include "nnmil/data_model.hpp"
#include "nnmil/fingerprint.hpp"

namespace nnmil {

/// Contiguous feature windows [start, end) covering [0, D).
struct ChunkWindows {
  std::size_t embed_dim = 0;
  std::vector<std::pair<std::size_t, std::size_t>> windows;

  std::size_t count() const { return windows.size(); }
};

/// Starts 0, S, 2S, ..., with a final window [D - H, D) appended when
/// (D - H) is not a multiple of S.
ChunkWindows chunk_windows(std::size_t embed_dim, std::size_t hidden_dim, std::size_t stride);

/// Windows a trained model is evaluated with: sliding windows for nnmil,
/// the single full window for full_bag_batch1.
ChunkWindows windows_for(const RunConfig& config);

/// Raw model outputs for each window over the whole bag (dropout off):
/// K x n_outputs.
template <typename T>
Eigen::MatrixXd chunk_outputs(const AggregatorParams<T>& params, const SlideBag& bag,
                              const ChunkWindows& windows);

/// Attention over the bag's patches averaged across windows (length N).
template <typename T>
Eigen::VectorXd chunk_attention(const AggregatorParams<T>& params, const SlideBag& bag,
                                const ChunkWindows& windows);

/// Ensemble output used as the slide-level prediction: mean logits
/// (classification), mean value (regression), log-mean-exp risk (survival).
Eigen::VectorXd ensemble_output(const Eigen::MatrixXd& chunk_outputs, Task task);

// ---------------------------------------------------------------------------
// Classification

struct ClsPrediction {
  Eigen::VectorXd mean_logits;      // C
  Eigen::MatrixXd per_chunk_probs;  // K x C
  Eigen::VectorXd mean_probs;       // C
  double h_total = 0.0;
  double h_aleatoric = 0.0;
  double mutual_information = 0.0;
  int predicted_class = 0;
};

/// Natural-log entropy of a probability vector (0 log 0 = 0).
double entropy(const Eigen::VectorXd& probs);

/// Decomposition from per-chunk logits (K x C).
ClsPrediction summarize_classification(const Eigen::MatrixXd& chunk_logits);

/// Decomposition from per-chunk probabilities; `mean_logits` only sets the
/// predicted class and is carried through.
ClsPrediction summarize_probabilities(const Eigen::MatrixXd& per_chunk_probs,
                                      const Eigen::VectorXd& mean_logits);

template <typename T>
ClsPrediction predict_classification(const AggregatorParams<T>& params, const SlideBag& bag,
                                     const ChunkWindows& windows);

// ---------------------------------------------------------------------------
// Regression

struct RegPrediction {
  double mean = 0.0;
  double stddev = 0.0;  // population std across chunks
  std::vector<double> per_chunk;
};

RegPrediction summarize_regression(std::span<const double> chunk_values);

template <typename T>
RegPrediction predict_regression(const AggregatorParams<T>& params, const SlideBag& bag,
                                 const ChunkWindows& windows);

// ---------------------------------------------------------------------------
// Survival

/// Breslow baseline: step function over distinct event times.
struct BaselineSurvival {
  std::vector<double> event_times;         // ascending, distinct
  std::vector<double> cumulative_hazard;   // H_0 at each event time

  double cumulative_hazard_at(double t) const;
  double survival_at(double t) const { return std::exp(-cumulative_hazard_at(t)); }
};

BaselineSurvival estimate_baseline_survival(std::span<const double> risks,
                                            std::span<const SurvivalRecord> records);

/// Median of the event times (event = 1); default evaluation time.
double median_event_time(std::span<const SurvivalRecord> records);

struct SurvPrediction {
  std::vector<double> per_chunk_risk;
  double risk = 0.0;       // log-mean-exp of the chunk risks
  double mean_risk = 0.0;  // arithmetic mean
  double var_risk = 0.0;   // population variance
  std::vector<double> eval_times;
  std::vector<std::vector<double>> per_chunk_survival;  // [time][chunk]
  std::vector<double> mean_survival;                    // [time]
  std::vector<double> unc_survival;                     // [time], population std
  bool n_wsi_adjusted = false;
};

/// log((1/K) sum exp(x_k)), computed stably.
double log_mean_exp(std::span<const double> values);

SurvPrediction summarize_survival(std::span<const double> chunk_risks, const BaselineSurvival& baseline,
                                  std::span<const double> eval_times);

template <typename T>
SurvPrediction predict_survival(const AggregatorParams<T>& params, const SlideBag& bag,
                                const ChunkWindows& windows, const BaselineSurvival& baseline,
                                std::span<const double> eval_times);

// ---------------------------------------------------------------------------
// Patient level

/// unc / sqrt(n_wsi)
double adjust_patient_uncertainty(double uncertainty, std::size_t n_wsi);

struct PatientClsPrediction {
  ClsPrediction combined;  // all chunks of all slides pooled
  std::size_t n_wsi = 0;
  double uncertainty = 0.0;  // h_aleatoric / sqrt(n_wsi)
};

struct PatientSurvPrediction {
  double risk = 0.0;       // mean slide risk
  double var_risk = 0.0;   // mean slide Var_risk
  std::vector<double> eval_times;
  std::vector<double> mean_survival;
  std::vector<double> unc_survival;  // mean slide Unc_S(t) / sqrt(n_wsi)
  std::size_t n_wsi = 0;
};

PatientClsPrediction aggregate_patient(std::span<const ClsPrediction> slides);
PatientSurvPrediction aggregate_patient(std::span<const SurvPrediction> slides);

}  // namespace nnmil
