#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nnmil/data_model.hpp"
#include "nnmil/rng.hpp"
#include "nnmil/types.hpp"

namespace nnmil {

/// A bag normalized to M rows. Padded rows are zero with mask 0.
struct FixedBag {
  EmbeddingMatrix embeddings;
  std::vector<std::uint8_t> valid_mask;
  std::string source_slide;

  std::size_t rows() const { return valid_mask.size(); }
  std::size_t embed_dim() const { return static_cast<std::size_t>(embeddings.cols()); }
  std::size_t n_valid() const;
  void validate() const;
};

/// Uniform M-subset when N > M (kept in original order); otherwise every
/// patch followed by M - N zero rows.
FixedBag sample_patches(const SlideBag& bag, std::size_t bag_size, Rng& rng);

/// The whole bag, no padding, all rows valid.
FixedBag whole_bag(const SlideBag& bag);

/// Appends `extra` zero rows with mask 0.
FixedBag pad_bag(const FixedBag& bag, std::size_t extra);

/// Sorted, distinct feature indices in [0, D).
struct FeatureIndexSet {
  std::vector<Eigen::Index> indices;

  std::size_t size() const { return indices.size(); }
  void validate(std::size_t embed_dim) const;
};

FeatureIndexSet sample_feature_indices(std::size_t embed_dim, std::size_t hidden_dim, Rng& rng);
FeatureIndexSet contiguous_features(std::size_t start, std::size_t width);

/// Batches of positions into the caller's sample arrays.
struct BatchPlan {
  std::vector<std::vector<std::size_t>> batches;
  std::size_t epoch_length = 0;

  friend bool operator==(const BatchPlan&, const BatchPlan&) = default;
};

/// Each batch holds floor(B / C) per class, the remainder dealt round-robin
/// from a random class offset. Classes whose pool runs out are redrawn
/// from a reshuffled pool. ceil(n / B) batches per epoch.
BatchPlan balanced_batches(std::span<const int> class_labels, std::size_t batch_size, Rng& rng);

/// Quantile bins over the targets, then the same quota scheme per bin.
BatchPlan regression_batches(std::span<const double> targets, std::size_t batch_size,
                             std::size_t n_bins, Rng& rng);

/// Event and censored strata with a per-batch event quota of
/// round(B * event_rate) clamped to [1, B - 1]. Within a stratum, draws
/// alternate across time terciles. Every batch holds at least one event.
BatchPlan survival_batches(std::span<const SurvivalRecord> records, std::size_t batch_size, Rng& rng);

/// Plain shuffled partition into ceil(n / B) batches.
BatchPlan shuffled_batches(std::size_t n, std::size_t batch_size, Rng& rng);

}  // namespace nnmil
