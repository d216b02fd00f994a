#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "nnmil/data_model.hpp"
#include "nnmil/rng.hpp"
#include "nnmil/sampling.hpp"
#include "nnmil/types.hpp"

namespace nnmil {

// Gated-attention aggregator.
//
// For a bag x_1..x_N (rows of D features) and a feature subset S:
//   score_i = w . (tanh(V_S x_{i,S}) * sigmoid(U_S x_{i,S}))
//   alpha   = softmax(score) over valid rows
//   h       = sum_i alpha_i x_i          (full D dimensions)
//   output  = cls_weight h + cls_bias
// V and U are H x D; a forward pass uses only the columns indexed by S.
template <typename T>
struct AggregatorParams {
  MatrixX<T> V;
  MatrixX<T> U;
  VectorX<T> w;
  MatrixX<T> cls_weight;
  VectorX<T> cls_bias;

  std::size_t embed_dim() const { return static_cast<std::size_t>(V.cols()); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(V.rows()); }
  std::size_t n_outputs() const { return static_cast<std::size_t>(cls_weight.rows()); }

  static AggregatorParams zeros(std::size_t embed_dim, std::size_t hidden_dim, std::size_t n_outputs);
  AggregatorParams zeros_like() const { return zeros(embed_dim(), hidden_dim(), n_outputs()); }

  /// Throws ShapeError / ValidationError on inconsistent shapes or non-finite entries.
  void validate() const;

  template <typename To>
  AggregatorParams<To> cast() const {
    return {V.template cast<To>(), U.template cast<To>(), w.template cast<To>(),
            cls_weight.template cast<To>(), cls_bias.template cast<To>()};
  }

  /// Calls f(name, shape, span) for each tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    f(std::string_view("V"), shape2(V), std::span<T>(V.data(), static_cast<std::size_t>(V.size())));
    f(std::string_view("U"), shape2(U), std::span<T>(U.data(), static_cast<std::size_t>(U.size())));
    f(std::string_view("w"), shape1(w), std::span<T>(w.data(), static_cast<std::size_t>(w.size())));
    f(std::string_view("cls_weight"), shape2(cls_weight),
      std::span<T>(cls_weight.data(), static_cast<std::size_t>(cls_weight.size())));
    f(std::string_view("cls_bias"), shape1(cls_bias),
      std::span<T>(cls_bias.data(), static_cast<std::size_t>(cls_bias.size())));
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<AggregatorParams*>(this)->visit([&](std::string_view name, std::vector<std::size_t> shape,
                                                   std::span<T> data) {
      f(name, std::move(shape), std::span<const T>(data));
    });
  }

  friend bool operator==(const AggregatorParams& a, const AggregatorParams& b) {
    auto same = [](const auto& x, const auto& y) {
      return x.rows() == y.rows() && x.cols() == y.cols() && x == y;
    };
    return same(a.V, b.V) && same(a.U, b.U) && same(a.w, b.w) && same(a.cls_weight, b.cls_weight) &&
           same(a.cls_bias, b.cls_bias);
  }

 private:
  template <typename M>
  static std::vector<std::size_t> shape2(const M& m) {
    return {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
  }
  template <typename M>
  static std::vector<std::size_t> shape1(const M& m) {
    return {static_cast<std::size_t>(m.size())};
  }
};

template <typename T>
using Gradients = AggregatorParams<T>;

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights (fan-in H for V, U, w and D
/// for cls_weight); zero bias.
template <typename T>
AggregatorParams<T> init_params(std::size_t embed_dim, std::size_t hidden_dim, std::size_t n_outputs,
                                Rng& rng);

/// Per-slide intermediates, restricted to the valid rows.
template <typename T>
struct SlideCache {
  std::vector<Eigen::Index> valid_rows;
  std::size_t total_rows = 0;
  MatrixX<T> x_sub;     // valid x F, the selected feature columns
  MatrixX<T> tanh_v;    // valid x H
  MatrixX<T> sig_u;     // valid x H
  MatrixX<T> dropout;   // valid x H inverted-dropout scales; empty when off
  MatrixX<T> gated;     // valid x H, after dropout
  VectorX<T> scores;    // valid
  VectorX<T> alpha;     // valid
  VectorX<T> h;         // D

  /// Attention over all rows, zero at padded slots.
  VectorX<T> attention() const;
};

template <typename T>
struct ForwardCache {
  FeatureIndexSet features;
  std::vector<SlideCache<T>> slides;
  MatrixX<T> outputs;  // batch x n_outputs
};

struct ForwardOptions {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;  // required when training with dropout > 0
};

template <typename T>
ForwardCache<T> forward(const AggregatorParams<T>& params, std::span<const FixedBag> batch,
                        const FeatureIndexSet& features, const ForwardOptions& options = {});

/// Re-runs a forward pass reusing the dropout masks recorded in `masks`.
template <typename T>
ForwardCache<T> forward_with_masks(const AggregatorParams<T>& params, std::span<const FixedBag> batch,
                                   const ForwardCache<T>& masks);

/// Bag-level targets for one batch; only the member matching `task` is used.
struct BatchTargets {
  Task task = Task::classification;
  std::vector<int> classes;
  std::vector<double> values;
  std::vector<SurvivalRecord> survival;

  std::size_t size() const;
};

template <typename T>
struct LossValue {
  T value{};
  MatrixX<T> grad;  // d loss / d outputs
};

// Cross-entropy (mean over batch), squared error (mean over batch), or the
// Breslow negative partial log-likelihood (mean over events, risk set
// {j : t_j >= t_i}).
template <typename T>
LossValue<T> evaluate_loss(const MatrixX<T>& outputs, const BatchTargets& targets);

template <typename T>
T loss(const MatrixX<T>& outputs, const BatchTargets& targets) {
  return evaluate_loss(outputs, targets).value;
}

template <typename T>
Gradients<T> backward_from_outputs(const AggregatorParams<T>& params, const ForwardCache<T>& cache,
                                   std::span<const FixedBag> batch, const MatrixX<T>& grad_outputs);

template <typename T>
Gradients<T> backward(const AggregatorParams<T>& params, const ForwardCache<T>& cache,
                      std::span<const FixedBag> batch, const BatchTargets& targets) {
  return backward_from_outputs(params, cache, batch, evaluate_loss(cache.outputs, targets).grad);
}

struct GradCheckOptions {
  std::size_t embed_dim = 8;
  std::size_t hidden_dim = 4;
  std::size_t n_outputs = 3;
  Task task = Task::classification;
  std::size_t n_trials = 3;
  double eps = 1e-5;
  double dropout = 0.25;
  std::size_t batch_size = 4;
  std::size_t bag_rows = 6;
  /// Survival only: number of events per batch (0 = random, at least one).
  std::size_t events = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
};

/// Relative error floor: |a - n| / max(|a|, |n|, kGradCheckFloor).
inline constexpr double kGradCheckFloor = 1e-6;

/// Compares analytic gradients with central differences over every
/// parameter entry, in double precision.
GradCheckResult grad_check(const GradCheckOptions& options, Rng& rng);

double grad_check(std::size_t embed_dim, std::size_t hidden_dim, std::size_t n_outputs, Task task,
                  std::size_t n_trials, double eps, Rng& rng);

}  // namespace nnmil
