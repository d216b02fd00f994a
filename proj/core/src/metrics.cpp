#include "nnmil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "nnmil/errors.hpp"
#include "nnmil/rng.hpp"
#include "nnmil/stats.hpp"

namespace nnmil {

std::string_view to_string(KappaWeighting weighting) {
  return weighting == KappaWeighting::quadratic ? "quadratic" : "none";
}

KappaWeighting parse_kappa_weighting(std::string_view text) {
  if (text == "none") return KappaWeighting::none;
  if (text == "quadratic") return KappaWeighting::quadratic;
  throw ValidationError("unknown kappa weighting '" + std::string(text) + "'");
}

namespace {

void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ValidationError(std::string(what) + ": inputs differ in length");
  if (a == 0) throw ValidationError(std::string(what) + ": empty input");
}

void require_nonnegative(std::span<const int> labels, const char* what) {
  for (int y : labels) {
    if (y < 0) throw ValidationError(std::string(what) + ": negative class label");
  }
}

}  // namespace

double accuracy(std::span<const int> truth, std::span<const int> predicted) {
  require_same_length(truth.size(), predicted.size(), "accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += truth[i] == predicted[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double balanced_accuracy(std::span<const int> truth, std::span<const int> predicted) {
  require_same_length(truth.size(), predicted.size(), "balanced_accuracy");
  require_nonnegative(truth, "balanced_accuracy");
  const int n_classes = *std::max_element(truth.begin(), truth.end()) + 1;
  std::vector<std::size_t> total(static_cast<std::size_t>(n_classes), 0), hit(total);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto c = static_cast<std::size_t>(truth[i]);
    ++total[c];
    hit[c] += truth[i] == predicted[i];
  }
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < total.size(); ++c) {
    if (total[c] == 0) continue;
    sum += static_cast<double>(hit[c]) / static_cast<double>(total[c]);
    ++present;
  }
  return sum / static_cast<double>(present);
}

double auc(std::span<const int> truth, std::span<const double> scores) {
  require_same_length(truth.size(), scores.size(), "auc");
  const std::size_t n = truth.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the midrank sum of positives, kept integral.
  std::uint64_t twice_rank_sum = 0;
  std::uint64_t n_pos = 0;
  for (std::size_t k = 0; k < n;) {
    std::size_t end = k;
    while (end < n && scores[order[end]] == scores[order[k]]) ++end;
    const std::uint64_t twice_midrank = static_cast<std::uint64_t>(k + 1 + end);  // 2 * mean of k+1..end
    for (std::size_t r = k; r < end; ++r) {
      const int y = truth[order[r]];
      if (y != 0 && y != 1) throw ValidationError("auc: labels must be 0 or 1");
      if (y == 1) {
        twice_rank_sum += twice_midrank;
        ++n_pos;
      }
    }
    k = end;
  }
  const std::uint64_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ValidationError("auc: both classes must be present");
  // 2U = wins * 2 + ties
  const std::uint64_t twice_u = twice_rank_sum - n_pos * (n_pos + 1);
  return (static_cast<double>(twice_u) / 2.0) / static_cast<double>(n_pos * n_neg);
}

double cohens_kappa(std::span<const int> truth, std::span<const int> predicted, KappaWeighting weighting,
                    std::size_t n_classes) {
  require_same_length(truth.size(), predicted.size(), "cohens_kappa");
  require_nonnegative(truth, "cohens_kappa");
  require_nonnegative(predicted, "cohens_kappa");
  std::size_t C = n_classes;
  if (C == 0) {
    C = static_cast<std::size_t>(std::max(*std::max_element(truth.begin(), truth.end()),
                                          *std::max_element(predicted.begin(), predicted.end()))) + 1;
  }
  if (C < 2) throw ValidationError("cohens_kappa: needs at least two classes");
  std::vector<double> table(C * C, 0.0), rows(C, 0.0), cols(C, 0.0);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto a = static_cast<std::size_t>(truth[i]), b = static_cast<std::size_t>(predicted[i]);
    if (a >= C || b >= C) throw ValidationError("cohens_kappa: label exceeds class count");
    table[a * C + b] += 1.0;
    rows[a] += 1.0;
    cols[b] += 1.0;
  }
  const double n = static_cast<double>(truth.size());
  double observed = 0.0, expected = 0.0;
  for (std::size_t i = 0; i < C; ++i) {
    for (std::size_t j = 0; j < C; ++j) {
      double w = i == j ? 0.0 : 1.0;
      if (weighting == KappaWeighting::quadratic) {
        const double d = static_cast<double>(i) - static_cast<double>(j);
        w = d * d / ((static_cast<double>(C) - 1.0) * (static_cast<double>(C) - 1.0));
      }
      observed += w * table[i * C + j] / n;
      expected += w * rows[i] * cols[j] / (n * n);
    }
  }
  if (expected == 0.0) throw ValidationError("cohens_kappa: undefined (no expected disagreement)");
  return 1.0 - observed / expected;
}

double pearson(std::span<const double> x, std::span<const double> y) {
  require_same_length(x.size(), y.size(), "pearson");
  if (x.size() < 2) throw ValidationError("pearson: needs at least two points");
  const double mx = stats::mean(x), my = stats::mean(y);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw ValidationError("pearson: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double concordance_index(std::span<const double> times, std::span<const int> events,
                         std::span<const double> risks) {
  require_same_length(times.size(), risks.size(), "concordance_index");
  require_same_length(times.size(), events.size(), "concordance_index");
  const std::size_t n = times.size();

  // Risk ranks 1..R for the Fenwick tree.
  std::vector<double> sorted_risks(risks.begin(), risks.end());
  std::sort(sorted_risks.begin(), sorted_risks.end());
  sorted_risks.erase(std::unique(sorted_risks.begin(), sorted_risks.end()), sorted_risks.end());
  const std::size_t R = sorted_risks.size();
  auto rank_of = [&](double r) {
    return static_cast<std::size_t>(std::lower_bound(sorted_risks.begin(), sorted_risks.end(), r) -
                                    sorted_risks.begin()) + 1;
  };
  std::vector<std::uint64_t> tree(R + 1, 0);
  auto add = [&](std::size_t i) {
    for (; i <= R; i += i & (~i + 1)) ++tree[i];
  };
  auto prefix = [&](std::size_t i) {
    std::uint64_t s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree[i];
    return s;
  };

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return times[a] > times[b]; });

  std::uint64_t concordant = 0, tied = 0, pairs = 0, inserted = 0;
  for (std::size_t k = 0; k < n;) {
    std::size_t end = k;
    while (end < n && times[order[end]] == times[order[k]]) ++end;
    // Everything already in the tree has a strictly later time.
    for (std::size_t r = k; r < end; ++r) {
      const std::size_t i = order[r];
      if (events[i] != 1) continue;
      const std::size_t rank = rank_of(risks[i]);
      const std::uint64_t below = prefix(rank - 1);
      const std::uint64_t equal = prefix(rank) - below;
      concordant += below;
      tied += equal;
      pairs += inserted;
    }
    for (std::size_t r = k; r < end; ++r) {
      add(rank_of(risks[order[r]]));
      ++inserted;
    }
    k = end;
  }
  if (pairs == 0) throw ValidationError("concordance_index: no comparable pairs");
  return (static_cast<double>(concordant) + 0.5 * static_cast<double>(tied)) / static_cast<double>(pairs);
}

double concordance_index(std::span<const SurvivalRecord> records, std::span<const double> risks) {
  std::vector<double> times;
  std::vector<int> events;
  for (const auto& r : records) {
    times.push_back(r.time);
    events.push_back(r.event);
  }
  return concordance_index(times, events, risks);
}

double KMCurve::survival_at(double t) const {
  const auto it = std::upper_bound(times.begin(), times.end(), t);
  if (it == times.begin()) return 1.0;
  return survival[static_cast<std::size_t>(it - times.begin()) - 1];
}

KMCurve km_curve(std::span<const SurvivalRecord> records) {
  if (records.empty()) throw ValidationError("km_curve: empty input");
  std::vector<SurvivalRecord> sorted(records.begin(), records.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const SurvivalRecord& a, const SurvivalRecord& b) { return a.time < b.time; });
  KMCurve curve;
  curve.times.push_back(0.0);
  curve.survival.push_back(1.0);
  curve.at_risk.push_back(sorted.size());
  curve.events.push_back(0);
  double s = 1.0;
  std::size_t at_risk = sorted.size();
  for (std::size_t k = 0; k < sorted.size();) {
    std::size_t end = k, deaths = 0;
    while (end < sorted.size() && sorted[end].time == sorted[k].time) deaths += sorted[end++].event == 1;
    if (deaths > 0) {
      s *= 1.0 - static_cast<double>(deaths) / static_cast<double>(at_risk);
      curve.times.push_back(sorted[k].time);
      curve.survival.push_back(s);
      curve.at_risk.push_back(at_risk);
      curve.events.push_back(deaths);
    }
    at_risk -= end - k;
    k = end;
  }
  return curve;
}

double chi_square_1df_sf(double x) {
  if (x <= 0.0) return 1.0;
  return std::erfc(std::sqrt(x / 2.0));
}

LogRankResult logrank_test(std::span<const SurvivalRecord> group_a, std::span<const SurvivalRecord> group_b) {
  if (group_a.empty() || group_b.empty()) throw ValidationError("logrank_test: both groups must be nonempty");
  struct Item {
    double time;
    int event;
    bool in_a;
  };
  std::vector<Item> items;
  for (const auto& r : group_a) items.push_back({r.time, r.event, true});
  for (const auto& r : group_b) items.push_back({r.time, r.event, false});
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.time < b.time; });

  double n_a = static_cast<double>(group_a.size()), n_b = static_cast<double>(group_b.size());
  LogRankResult out;
  for (std::size_t k = 0; k < items.size();) {
    std::size_t end = k;
    double d = 0.0, d_a = 0.0, leave_a = 0.0, leave_b = 0.0;
    while (end < items.size() && items[end].time == items[k].time) {
      const Item& it = items[end++];
      d += it.event;
      if (it.in_a) {
        d_a += it.event;
        leave_a += 1.0;
      } else {
        leave_b += 1.0;
      }
    }
    if (d > 0.0) {
      const double n = n_a + n_b;
      out.observed_a += d_a;
      out.expected_a += d * n_a / n;
      if (n > 1.0) out.variance += d * (n_a / n) * (n_b / n) * (n - d) / (n - 1.0);
    }
    n_a -= leave_a;
    n_b -= leave_b;
    k = end;
  }
  if (out.variance <= 0.0) throw ValidationError("logrank_test: zero variance (no informative events)");
  const double diff = out.observed_a - out.expected_a;
  out.statistic = diff * diff / out.variance;
  out.p_value = chi_square_1df_sf(out.statistic);
  return out;
}

BootstrapResult bootstrap_ci(const SampleMetric& metric, std::size_t n_samples, const BootstrapOptions& options) {
  if (n_samples == 0) throw ValidationError("bootstrap_ci: empty data");
  if (options.n_replicates < 2) throw ValidationError("bootstrap_ci: needs at least two replicates");
  std::vector<std::size_t> all(n_samples);
  std::iota(all.begin(), all.end(), 0);

  BootstrapResult out;
  out.point = metric(all);
  out.n_replicates = options.n_replicates;
  std::vector<double> values;
  values.reserve(options.n_replicates);
  std::vector<std::size_t> draw(n_samples);
  for (std::size_t r = 0; r < options.n_replicates; ++r) {
    Rng rng(mix_seed(options.seed, r));
    for (std::size_t attempt = 0;; ++attempt) {
      if (attempt > options.max_redraws) {
        throw ValidationError("bootstrap_ci: metric undefined on " + std::to_string(options.max_redraws) +
                              " consecutive resamples (degenerate data)");
      }
      for (auto& d : draw) d = rng.uniform_index(n_samples);
      try {
        values.push_back(metric(draw));
        break;
      } catch (const ValidationError&) {
        ++out.n_redrawn;
      }
    }
  }
  out.mean = stats::mean(values);
  double ss = 0.0;
  for (double v : values) ss += (v - out.mean) * (v - out.mean);
  out.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  std::sort(values.begin(), values.end());
  out.ci_low = stats::percentile_sorted(values, 0.025);
  out.ci_high = stats::percentile_sorted(values, 0.975);
  return out;
}

std::vector<RejectionPoint> rejection_curve(const SampleMetric& metric, std::span<const double> uncertainties,
                                            std::span<const double> fractions) {
  const std::size_t n = uncertainties.size();
  if (n == 0) throw ValidationError("rejection_curve: empty input");
  for (double u : uncertainties) {
    if (std::isnan(u)) throw ValidationError("rejection_curve: NaN uncertainty");
  }
  // Most uncertain first; equal values keep sample order.
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return uncertainties[a] > uncertainties[b]; });

  std::vector<RejectionPoint> curve;
  for (double q : fractions) {
    if (!(q >= 0.0 && q < 1.0)) throw ValidationError("rejection_curve: fractions must lie in [0, 1)");
    // Slack absorbs products like 0.1 * 30 = 3.0000000000000004.
    const auto drop = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n) - 1e-12));
    std::vector<std::size_t> kept(order.begin() + static_cast<std::ptrdiff_t>(std::min(drop, n)), order.end());
    std::sort(kept.begin(), kept.end());
    RejectionPoint p{q, std::nullopt, kept.size()};
    if (!kept.empty()) {
      try {
        p.value = metric(kept);
      } catch (const ValidationError&) {
        p.value.reset();
      }
    }
    curve.push_back(p);
  }
  return curve;
}

std::string km_csv(const KMCurve& curve) {
  std::ostringstream out;
  out.precision(17);
  out << "time,survival,at_risk\n";
  for (std::size_t i = 0; i < curve.times.size(); ++i) {
    out << curve.times[i] << ',' << curve.survival[i] << ',' << curve.at_risk[i] << '\n';
  }
  return out.str();
}

std::string rejection_csv(std::span<const RejectionPoint> curve) {
  std::ostringstream out;
  out.precision(17);
  out << "fraction,value,n_retained\n";
  for (const auto& p : curve) {
    out << p.fraction << ',';
    if (p.value) out << *p.value;
    out << ',' << p.n_retained << '\n';
  }
  return out.str();
}

}  // namespace nnmil
