#pragma once

#include <span>
#include <vector>

namespace nnmil::stats {

/// Percentile with linear interpolation between order statistics
/// (position p * (n - 1) in the sorted sample). p in [0, 1].
double percentile(std::span<const double> values, double p);
double percentile_sorted(std::span<const double> sorted, double p);

double median(std::span<const double> values);

// Mean computed as x0 + sum(x_i - x0) / n, so a constant input returns
// that constant exactly.
double mean(std::span<const double> values);

/// Population variance (divides by n).
double population_variance(std::span<const double> values);
double population_stddev(std::span<const double> values);

}  // namespace nnmil::stats
