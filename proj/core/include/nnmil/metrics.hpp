#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nnmil/data_model.hpp"

namespace nnmil {

enum class KappaWeighting { none, quadratic };

std::string_view to_string(KappaWeighting weighting);
KappaWeighting parse_kappa_weighting(std::string_view text);

/// Fraction of predictions equal to the truth.
double accuracy(std::span<const int> truth, std::span<const int> predicted);

/// Mean per-class recall over the classes present in `truth`.
double balanced_accuracy(std::span<const int> truth, std::span<const int> predicted);

/// Mann-Whitney AUC with tie credit 1/2; `truth` holds 0/1.
double auc(std::span<const int> truth, std::span<const double> scores);

/// 1 - observed / expected weighted disagreement. `n_classes` = 0 infers
/// max label + 1.
double cohens_kappa(std::span<const int> truth, std::span<const int> predicted,
                    KappaWeighting weighting = KappaWeighting::none, std::size_t n_classes = 0);

double pearson(std::span<const double> x, std::span<const double> y);

/// Harrell's C over pairs with t_i < t_j and event_i = 1; higher risk
/// should mean earlier events. Ties in risk earn 1/2. O(n log n).
double concordance_index(std::span<const double> times, std::span<const int> events,
                         std::span<const double> risks);
double concordance_index(std::span<const SurvivalRecord> records, std::span<const double> risks);

struct KMCurve {
  std::vector<double> times;        // 0 followed by the distinct event times
  std::vector<double> survival;     // S(t) just after each time
  std::vector<std::size_t> at_risk; // number at risk at each time
  std::vector<std::size_t> events;  // events at each time

  double survival_at(double t) const;
};

/// Product-limit estimator.
KMCurve km_curve(std::span<const SurvivalRecord> records);

struct LogRankResult {
  double statistic = 0.0;
  double p_value = 1.0;
  double observed_a = 0.0;
  double expected_a = 0.0;
  double variance = 0.0;
};

/// Two-sided, one degree of freedom, hypergeometric variance.
LogRankResult logrank_test(std::span<const SurvivalRecord> group_a, std::span<const SurvivalRecord> group_b);

/// Upper tail of the chi-square distribution with one degree of freedom.
double chi_square_1df_sf(double x);

/// A metric evaluated on a subset of sample indices. It throws
/// ValidationError when its preconditions fail on that subset.
using SampleMetric = std::function<double(std::span<const std::size_t> indices)>;

struct BootstrapResult {
  double point = 0.0;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation of the replicates
  double ci_low = 0.0;
  double ci_high = 0.0;
  std::size_t n_replicates = 0;
  std::size_t n_redrawn = 0;
};

struct BootstrapOptions {
  std::size_t n_replicates = 1000;
  std::uint64_t seed = 42;
  /// Redraws allowed per replicate before the data is declared degenerate.
  std::size_t max_redraws = 100;
};

/// Percentile bootstrap over samples drawn with replacement. Replicate r
/// draws from Rng(mix_seed(seed, r)).
BootstrapResult bootstrap_ci(const SampleMetric& metric, std::size_t n_samples, const BootstrapOptions& options = {});

struct RejectionPoint {
  double fraction = 0.0;
  std::optional<double> value;  // empty when the metric is undefined on the retained set
  std::size_t n_retained = 0;
};

/// For each q drops the ceil(q N) most uncertain samples (equal uncertainties
/// keep sample order) and recomputes the metric on the rest.
std::vector<RejectionPoint> rejection_curve(const SampleMetric& metric, std::span<const double> uncertainties,
                                            std::span<const double> fractions);

/// CSV plot data: "time,survival,at_risk".
std::string km_csv(const KMCurve& curve);
/// CSV plot data: "fraction,value,n_retained" (empty value when undefined).
std::string rejection_csv(std::span<const RejectionPoint> curve);

}  // namespace nnmil
