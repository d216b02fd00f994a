#include "nnmil/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>

#include "nnmil/errors.hpp"

namespace nnmil {

std::size_t FixedBag::n_valid() const {
  return static_cast<std::size_t>(std::count(valid_mask.begin(), valid_mask.end(), std::uint8_t{1}));
}

void FixedBag::validate() const {
  if (static_cast<std::size_t>(embeddings.rows()) != valid_mask.size()) {
    throw ShapeError("fixed bag '" + source_slide + "': mask length differs from row count");
  }
  if (n_valid() == 0) throw ValidationError("fixed bag '" + source_slide + "': no valid rows");
}

FixedBag sample_patches(const SlideBag& bag, std::size_t bag_size, Rng& rng) {
  if (bag_size < 1) throw ValidationError("sample_patches: M must be >= 1");
  const std::size_t N = bag.n_patches();
  const auto D = bag.embeddings.cols();
  FixedBag out;
  out.source_slide = bag.slide_id;
  out.embeddings = EmbeddingMatrix::Zero(static_cast<Eigen::Index>(bag_size), D);
  out.valid_mask.assign(bag_size, 0);
  if (N > bag_size) {
    const auto rows = rng.sample_without_replacement(N, bag_size);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out.embeddings.row(static_cast<Eigen::Index>(r)) = bag.embeddings.row(static_cast<Eigen::Index>(rows[r]));
      out.valid_mask[r] = 1;
    }
  } else {
    out.embeddings.topRows(static_cast<Eigen::Index>(N)) = bag.embeddings;
    std::fill_n(out.valid_mask.begin(), N, std::uint8_t{1});
  }
  return out;
}

FixedBag whole_bag(const SlideBag& bag) {
  FixedBag out;
  out.source_slide = bag.slide_id;
  out.embeddings = bag.embeddings;
  out.valid_mask.assign(bag.n_patches(), 1);
  return out;
}

FixedBag pad_bag(const FixedBag& bag, std::size_t extra) {
  FixedBag out;
  out.source_slide = bag.source_slide;
  out.embeddings = EmbeddingMatrix::Zero(static_cast<Eigen::Index>(bag.rows() + extra),
                                         bag.embeddings.cols());
  out.embeddings.topRows(bag.embeddings.rows()) = bag.embeddings;
  out.valid_mask = bag.valid_mask;
  out.valid_mask.resize(bag.rows() + extra, 0);
  return out;
}

void FeatureIndexSet::validate(std::size_t embed_dim) const {
  if (indices.empty()) throw ValidationError("feature index set is empty");
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || static_cast<std::size_t>(indices[i]) >= embed_dim) {
      throw ValidationError("feature index outside [0, D)");
    }
    if (i > 0 && indices[i] <= indices[i - 1]) {
      throw ValidationError("feature indices must be strictly ascending");
    }
  }
}

FeatureIndexSet sample_feature_indices(std::size_t embed_dim, std::size_t hidden_dim, Rng& rng) {
  if (hidden_dim > embed_dim) throw ValidationError("sample_feature_indices: H exceeds D");
  if (hidden_dim < 1) throw ValidationError("sample_feature_indices: H must be >= 1");
  FeatureIndexSet out;
  if (hidden_dim == embed_dim) {
    out.indices.resize(embed_dim);
    std::iota(out.indices.begin(), out.indices.end(), Eigen::Index{0});
    return out;
  }
  for (std::size_t i : rng.sample_without_replacement(embed_dim, hidden_dim)) {
    out.indices.push_back(static_cast<Eigen::Index>(i));
  }
  return out;
}

FeatureIndexSet contiguous_features(std::size_t start, std::size_t width) {
  FeatureIndexSet out;
  out.indices.resize(width);
  std::iota(out.indices.begin(), out.indices.end(), static_cast<Eigen::Index>(start));
  return out;
}

// ---------------------------------------------------------------------------
// Batch samplers

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

// Draws members in a fixed order; once exhausted the order is rebuilt by
// `refill`, so draws continue with replacement across cycles.
class CyclingPool {
 public:
  using Refill = std::function<std::vector<std::size_t>(Rng&)>;

  CyclingPool(Refill refill, Rng& rng) : refill_(std::move(refill)) { order_ = refill_(rng); }

  std::size_t next(Rng& rng) {
    if (cursor_ == order_.size()) {
      order_ = refill_(rng);
      cursor_ = 0;
    }
    return order_[cursor_++];
  }

 private:
  Refill refill_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

CyclingPool shuffled_pool(std::vector<std::size_t> members, Rng& rng) {
  return CyclingPool(
      [members = std::move(members)](Rng& r) {
        auto order = members;
        r.shuffle(order);
        return order;
      },
      rng);
}

// floor(B / G) per group plus one extra for the r = B mod G groups starting
// at a random offset.
std::vector<std::size_t> deal_quotas(std::size_t batch, std::size_t groups, Rng& rng) {
  std::vector<std::size_t> quota(groups, batch / groups);
  const std::size_t remainder = batch % groups;
  const std::size_t offset = rng.uniform_index(groups);
  for (std::size_t k = 0; k < remainder; ++k) ++quota[(offset + k) % groups];
  return quota;
}

BatchPlan quota_batches(std::vector<CyclingPool>& pools, std::size_t n, std::size_t batch_size,
                        Rng& rng) {
  const std::size_t eff = std::min(batch_size, n);
  BatchPlan plan;
  plan.epoch_length = ceil_div(n, batch_size);
  for (std::size_t b = 0; b < plan.epoch_length; ++b) {
    const auto quota = deal_quotas(eff, pools.size(), rng);
    std::vector<std::size_t> batch;
    batch.reserve(eff);
    for (std::size_t g = 0; g < pools.size(); ++g) {
      for (std::size_t k = 0; k < quota[g]; ++k) batch.push_back(pools[g].next(rng));
    }
    rng.shuffle(batch);
    plan.batches.push_back(std::move(batch));
  }
  return plan;
}

}  // namespace

BatchPlan shuffled_batches(std::size_t n, std::size_t batch_size, Rng& rng) {
  if (batch_size < 1) throw ValidationError("batch size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  BatchPlan plan;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    plan.batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                              order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  plan.epoch_length = plan.batches.size();
  return plan;
}

BatchPlan balanced_batches(std::span<const int> class_labels, std::size_t batch_size, Rng& rng) {
  if (class_labels.empty()) throw ValidationError("balanced_batches: no samples");
  const int max_label = *std::max_element(class_labels.begin(), class_labels.end());
  if (*std::min_element(class_labels.begin(), class_labels.end()) < 0) {
    throw ValidationError("balanced_batches: negative class label");
  }
  const auto n_classes = static_cast<std::size_t>(max_label) + 1;
  if (batch_size < n_classes) throw ValidationError("balanced_batches: batch size smaller than class count");

  std::vector<std::vector<std::size_t>> members(n_classes);
  for (std::size_t i = 0; i < class_labels.size(); ++i) {
    members[static_cast<std::size_t>(class_labels[i])].push_back(i);
  }
  std::vector<CyclingPool> pools;
  for (std::size_t c = 0; c < n_classes; ++c) {
    if (members[c].empty()) {
      throw ValidationError("balanced_batches: class " + std::to_string(c) + " has no samples");
    }
    pools.push_back(shuffled_pool(std::move(members[c]), rng));
  }
  return quota_batches(pools, class_labels.size(), batch_size, rng);
}

BatchPlan regression_batches(std::span<const double> targets, std::size_t batch_size,
                             std::size_t n_bins, Rng& rng) {
  if (targets.empty()) throw ValidationError("regression_batches: no samples");
  if (batch_size < 1) throw ValidationError("batch size must be >= 1");
  for (double t : targets) {
    if (!std::isfinite(t)) throw ValidationError("regression_batches: non-finite target");
  }
  const std::size_t n = targets.size();
  n_bins = std::clamp<std::size_t>(n_bins, 1, n);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return targets[a] < targets[b]; });

  // Equal-count bins by rank; tied targets share the bin of their first rank.
  std::vector<std::vector<std::size_t>> bins(n_bins);
  std::size_t group_start = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (r > 0 && targets[order[r]] != targets[order[r - 1]]) group_start = r;
    bins[group_start * n_bins / n].push_back(order[r]);
  }
  std::erase_if(bins, [](const auto& b) { return b.empty(); });
  if (bins.size() == 1) return shuffled_batches(n, batch_size, rng);

  std::vector<CyclingPool> pools;
  for (auto& b : bins) pools.push_back(shuffled_pool(std::move(b), rng));
  return quota_batches(pools, n, batch_size, rng);
}

namespace {

// Stratum order: members split into time terciles, each shuffled, then
// interleaved so consecutive draws cycle through early, middle, late.
std::vector<std::size_t> tercile_order(const std::vector<std::size_t>& by_time, Rng& rng) {
  const std::size_t n = by_time.size();
  std::vector<std::vector<std::size_t>> terciles(3);
  for (std::size_t r = 0; r < n; ++r) terciles[r * 3 / n].push_back(by_time[r]);
  for (auto& t : terciles) rng.shuffle(t);
  std::vector<std::size_t> out;
  out.reserve(n);
  for (std::size_t k = 0; out.size() < n; ++k) {
    for (auto& t : terciles) {
      if (k < t.size()) out.push_back(t[k]);
    }
  }
  return out;
}

}  // namespace

BatchPlan survival_batches(std::span<const SurvivalRecord> records, std::size_t batch_size, Rng& rng) {
  if (records.empty()) throw ValidationError("survival_batches: no samples");
  if (batch_size < 1) throw ValidationError("batch size must be >= 1");
  std::vector<std::size_t> events, censored;
  for (std::size_t i = 0; i < records.size(); ++i) {
    (records[i].event == 1 ? events : censored).push_back(i);
  }
  if (events.empty()) throw ValidationError("survival_batches: split contains no events");

  auto by_time = [&](std::vector<std::size_t> v) {
    std::stable_sort(v.begin(), v.end(),
                     [&](std::size_t a, std::size_t b) { return records[a].time < records[b].time; });
    return v;
  };
  auto make_pool = [&](std::vector<std::size_t> members) {
    return CyclingPool(
        [sorted = by_time(std::move(members))](Rng& r) { return tercile_order(sorted, r); }, rng);
  };

  const std::size_t n = records.size();
  const std::size_t eff = std::min(batch_size, n);
  std::size_t event_quota = eff;
  if (!censored.empty() && eff > 1) {
    const double rate = static_cast<double>(events.size()) / static_cast<double>(n);
    const auto q = static_cast<long>(std::lround(static_cast<double>(eff) * rate));
    event_quota = static_cast<std::size_t>(std::clamp<long>(q, 1, static_cast<long>(eff) - 1));
  } else if (eff == 1) {
    event_quota = 1;
  }

  CyclingPool event_pool = make_pool(events);
  std::optional<CyclingPool> censored_pool;
  if (!censored.empty()) censored_pool.emplace(make_pool(censored));

  BatchPlan plan;
  plan.epoch_length = ceil_div(n, batch_size);
  for (std::size_t b = 0; b < plan.epoch_length; ++b) {
    std::vector<std::size_t> batch;
    batch.reserve(eff);
    for (std::size_t k = 0; k < event_quota; ++k) batch.push_back(event_pool.next(rng));
    for (std::size_t k = event_quota; k < eff; ++k) batch.push_back(censored_pool->next(rng));
    rng.shuffle(batch);
    plan.batches.push_back(std::move(batch));
  }
  return plan;
}

}  // namespace nnmil
