#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "nnmil/errors.hpp"
#include "nnmil/metrics.hpp"
#include "nnmil/rng.hpp"

namespace nnmil {
namespace {

double brute_auc(const std::vector<int>& y, const std::vector<double>& s) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1.0;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

double brute_cindex(const std::vector<double>& t, const std::vector<int>& e, const std::vector<double>& r) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (std::size_t j = 0; j < t.size(); ++j) {
      if (e[i] != 1 || !(t[i] < t[j])) continue;
      den += 1.0;
      num += r[i] > r[j] ? 1.0 : (r[i] == r[j] ? 0.5 : 0.0);
    }
  }
  return num / den;
}

TEST(BalancedAccuracy, Examples) {
  const std::vector<int> y{0, 0, 1, 1}, perfect{0, 0, 1, 1}, pred{0, 1, 1, 1};
  EXPECT_EQ(balanced_accuracy(y, perfect), 1.0);
  EXPECT_EQ(balanced_accuracy(y, pred), 0.75);
  const std::vector<int> y3{0, 0, 1, 1, 2, 2}, constant(6, 1);
  EXPECT_DOUBLE_EQ(balanced_accuracy(y3, constant), 1.0 / 3.0);
  EXPECT_EQ(accuracy(y, pred), 0.75);
}

TEST(Auc, Examples) {
  const std::vector<int> y{0, 0, 1, 1};
  EXPECT_EQ(auc(y, std::vector<double>{0.1, 0.2, 0.8, 0.9}), 1.0);
  EXPECT_EQ(auc(y, std::vector<double>{0.9, 0.8, 0.2, 0.1}), 0.0);
  EXPECT_EQ(auc(std::vector<int>{0, 1}, std::vector<double>{0.4, 0.4}), 0.5);
  EXPECT_THROW(auc(std::vector<int>{1, 1}, std::vector<double>{0.1, 0.2}), ValidationError);
}

TEST(Auc, EqualsPairEnumerationExactly) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(60);
    std::vector<int> y(n);
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng.bernoulli(0.4));
      s[i] = static_cast<double>(rng.uniform_index(8));  // many ties
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_EQ(auc(y, s), brute_auc(y, s));
  }
}

TEST(Kappa, Examples) {
  const std::vector<int> y{0, 1, 2, 1};
  EXPECT_EQ(cohens_kappa(y, y), 1.0);
  EXPECT_DOUBLE_EQ(cohens_kappa(std::vector<int>{0, 1}, std::vector<int>{1, 0}), -1.0);
  const std::vector<int> t{0, 1, 2}, p{0, 1, 1};
  EXPECT_GE(cohens_kappa(t, p, KappaWeighting::quadratic), cohens_kappa(t, p, KappaWeighting::none));
  EXPECT_THROW(cohens_kappa(std::vector<int>{1, 1}, std::vector<int>{1, 1}), ValidationError);
}

TEST(Kappa, MatchesHandTable) {
  // truth {0,1,2}, pred {0,1,1}: po = 2/3, pe = (1*1 + 1*2 + 1*0)/9 = 1/3.
  const std::vector<int> t{0, 1, 2}, p{0, 1, 1};
  EXPECT_NEAR(cohens_kappa(t, p), (2.0 / 3.0 - 1.0 / 3.0) / (1.0 - 1.0 / 3.0), 1e-15);
  // Quadratic weights (i-j)^2/4: observed 0.25/3, expected sum over marginals.
  const double obs = (0.25) / 3.0;
  double exp_dis = 0.0;
  const double pt[3] = {1.0 / 3, 1.0 / 3, 1.0 / 3}, pp[3] = {1.0 / 3, 2.0 / 3, 0.0};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) exp_dis += (i - j) * (i - j) / 4.0 * pt[i] * pp[j];
  }
  EXPECT_NEAR(cohens_kappa(t, p, KappaWeighting::quadratic), 1.0 - obs / exp_dis, 1e-15);
}

TEST(Pearson, Examples) {
  const std::vector<double> x{1, 2, 3};
  EXPECT_DOUBLE_EQ(pearson(x, x), 1.0);
  EXPECT_DOUBLE_EQ(pearson(x, std::vector<double>{-1, -2, -3}), -1.0);
  EXPECT_NEAR(pearson(x, std::vector<double>{1, 2, 4}), 3.0 / std::sqrt(2.0 * 14.0 / 3.0), 1e-15);
  EXPECT_THROW(pearson(x, std::vector<double>{2, 2, 2}), ValidationError);
}

TEST(CIndex, Examples) {
  const std::vector<double> t{1, 2, 3};
  const std::vector<int> all{1, 1, 1}, some{1, 0, 1};
  EXPECT_EQ(concordance_index(t, all, std::vector<double>{3, 2, 1}), 1.0);
  EXPECT_EQ(concordance_index(t, all, std::vector<double>{1, 2, 3}), 0.0);
  // Comparable pairs (1,2), (1,3): risk 3 beats 1 and 2.
  EXPECT_EQ(concordance_index(t, some, std::vector<double>{3, 1, 2}), 1.0);
  const std::vector<double> r{3, 1, 2};
  EXPECT_EQ(concordance_index(t, some, r), brute_cindex(t, some, r));
}

TEST(CIndex, MatchesPairEnumerationWithTies) {
  Rng rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(80);
    std::vector<double> t(n), r(n);
    std::vector<int> e(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = static_cast<double>(1 + rng.uniform_index(15));
      r[i] = static_cast<double>(rng.uniform_index(6));
      e[i] = static_cast<int>(rng.bernoulli(0.6));
    }
    t[0] = 0.5;
    e[0] = 1;  // at least one comparable pair
    EXPECT_EQ(concordance_index(t, e, r), brute_cindex(t, e, r));
  }
}

TEST(KaplanMeier, Examples) {
  const std::vector<SurvivalRecord> censored{{1, 0}, {2, 0}};
  const KMCurve flat = km_curve(censored);
  EXPECT_EQ(flat.survival_at(5.0), 1.0);
  const std::vector<SurvivalRecord> two{{1, 1}, {2, 1}};
  const KMCurve c = km_curve(two);
  EXPECT_EQ(c.survival_at(1.0), 0.5);
  EXPECT_EQ(c.survival_at(2.0), 0.0);
  EXPECT_EQ(c.survival_at(0.5), 1.0);
}

TEST(KaplanMeier, ProductLimitWithCensoring) {
  const std::vector<SurvivalRecord> recs{{1, 1}, {2, 0}, {3, 1}, {3, 1}, {4, 0}, {5, 1}};
  const KMCurve c = km_curve(recs);
  EXPECT_EQ(c.times, (std::vector<double>{0, 1, 3, 5}));
  EXPECT_EQ(c.at_risk, (std::vector<std::size_t>{6, 6, 4, 1}));
  EXPECT_NEAR(c.survival_at(1.0), 5.0 / 6.0, 1e-15);
  EXPECT_NEAR(c.survival_at(3.5), 5.0 / 6.0 * 2.0 / 4.0, 1e-15);
  EXPECT_EQ(c.survival_at(5.0), 0.0);
  EXPECT_EQ(km_csv(c).substr(0, 22), "time,survival,at_risk\n");
}

TEST(LogRank, IdenticalGroups) {
  const std::vector<SurvivalRecord> g{{1, 1}, {2, 0}, {3, 1}, {4, 1}};
  const LogRankResult r = logrank_test(g, g);
  EXPECT_NEAR(r.statistic, 0.0, 1e-15);
  EXPECT_NEAR(r.p_value, 1.0, 1e-12);
}

TEST(LogRank, MatchesExactHandTable) {
  // O/E/V tallied with exact rational arithmetic.
  const std::vector<SurvivalRecord> a{{6, 1}, {7, 0}, {10, 1}, {15, 1}, {19, 0}, {25, 1}};
  const std::vector<SurvivalRecord> b{{1, 1}, {1, 1}, {3, 1}, {4, 1}, {5, 1}, {8, 0}, {11, 1}};
  const LogRankResult r = logrank_test(a, b);
  EXPECT_EQ(r.observed_a, 4.0);
  EXPECT_NEAR(r.expected_a, 30181.0 / 4290.0, 1e-9);
  EXPECT_NEAR(r.variance, 12520511.0 / 7361640.0, 1e-9);
  EXPECT_NEAR(r.statistic, 5.4165981244695205, 1e-9);
  EXPECT_NEAR(r.p_value, 0.019946186458319113, 1e-9);
}

TEST(LogRank, ChiSquareTail) {
  EXPECT_NEAR(chi_square_1df_sf(3.841458820694124), 0.05, 1e-12);
  EXPECT_EQ(chi_square_1df_sf(0.0), 1.0);
}

SampleMetric mean_metric(const std::vector<double>& v) {
  return [&v](std::span<const std::size_t> idx) {
    double acc = 0.0;
    for (std::size_t i : idx) acc += v[i];
    return acc / static_cast<double>(idx.size());
  };
}

TEST(Bootstrap, ConstantMetricHasNoSpread) {
  const BootstrapResult r = bootstrap_ci([](std::span<const std::size_t>) { return 0.7; }, 30, {200, 1, 100});
  EXPECT_EQ(r.stddev, 0.0);
  EXPECT_EQ(r.ci_low, 0.7);
  EXPECT_EQ(r.ci_high, 0.7);
  EXPECT_EQ(r.point, 0.7);
}

TEST(Bootstrap, SameSeedSameResult) {
  std::vector<double> v(50);
  Rng rng(3);
  for (double& x : v) x = rng.normal();
  const BootstrapResult a = bootstrap_ci(mean_metric(v), v.size(), {300, 9, 100});
  const BootstrapResult b = bootstrap_ci(mean_metric(v), v.size(), {300, 9, 100});
  EXPECT_EQ(a.mean, b.mean);
  EXPECT_EQ(a.ci_low, b.ci_low);
  EXPECT_EQ(a.ci_high, b.ci_high);
  EXPECT_LE(a.ci_low, a.point);
  EXPECT_GE(a.ci_high, a.point);
}

TEST(Bootstrap, AucIntervalShrinksWithSampleSize) {
  auto width = [](std::size_t n) {
    Rng rng(4);
    std::vector<int> y(n);
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(i % 2);
      s[i] = rng.normal() + 1.0 * y[i];
    }
    SampleMetric m = [&](std::span<const std::size_t> idx) {
      std::vector<int> yy;
      std::vector<double> ss;
      for (std::size_t i : idx) {
        yy.push_back(y[i]);
        ss.push_back(s[i]);
      }
      return auc(yy, ss);
    };
    const BootstrapResult r = bootstrap_ci(m, n, {1000, 5, 100});
    return r.ci_high - r.ci_low;
  };
  const double ratio = width(200) / width(800);
  EXPECT_NEAR(ratio, 2.0, 0.6);
}

TEST(Bootstrap, DegenerateReplicatesAreRedrawn) {
  // 1 positive in 20: many resamples miss it and must be redrawn.
  std::vector<int> y(20, 0);
  y[3] = 1;
  std::vector<double> s(20, 0.0);
  s[3] = 1.0;
  SampleMetric m = [&](std::span<const std::size_t> idx) {
    std::vector<int> yy;
    std::vector<double> ss;
    for (std::size_t i : idx) {
      yy.push_back(y[i]);
      ss.push_back(s[i]);
    }
    return auc(yy, ss);
  };
  const BootstrapResult r = bootstrap_ci(m, 20, {200, 6, 100});
  EXPECT_GT(r.n_redrawn, 0u);
  EXPECT_EQ(r.n_replicates, 200u);
  EXPECT_EQ(r.ci_low, 1.0);
}

TEST(RejectionCurve, ZeroFractionIsBaseMetric) {
  const std::vector<double> v{1, 2, 3, 4}, u{0.1, 0.2, 0.3, 0.4}, q{0.0};
  const auto curve = rejection_curve(mean_metric(v), u, q);
  ASSERT_EQ(curve.size(), 1u);
  EXPECT_EQ(curve[0].value, 2.5);
  EXPECT_EQ(curve[0].n_retained, 4u);
}

TEST(RejectionCurve, ErrorIndicatorUncertaintyReachesPerfect) {
  // 3 errors in 10; uncertainty 1 exactly on the errors.
  std::vector<double> correct(10, 1.0), u(10, 0.0);
  for (std::size_t i : {1u, 4u, 8u}) {
    correct[i] = 0.0;
    u[i] = 1.0;
  }
  const std::vector<double> q{0.0, 0.1, 0.2, 0.3, 0.5};
  const auto curve = rejection_curve(mean_metric(correct), u, q);
  EXPECT_EQ(curve[0].value, 0.7);
  EXPECT_EQ(curve[3].value, 1.0);
  EXPECT_EQ(curve[4].value, 1.0);
  EXPECT_EQ(curve[4].n_retained, 5u);
  for (std::size_t k = 1; k < curve.size(); ++k) EXPECT_GE(*curve[k].value, *curve[k - 1].value);
}

TEST(RejectionCurve, UndefinedPointsAreMarked) {
  std::vector<int> y{0, 1, 0, 1};
  std::vector<double> s{0.1, 0.9, 0.2, 0.8}, u{0.0, 1.0, 0.0, 1.0};
  SampleMetric m = [&](std::span<const std::size_t> idx) {
    std::vector<int> yy;
    std::vector<double> ss;
    for (std::size_t i : idx) {
      yy.push_back(y[i]);
      ss.push_back(s[i]);
    }
    return auc(yy, ss);
  };
  const std::vector<double> q{0.0, 0.5};
  const auto curve = rejection_curve(m, u, q);
  EXPECT_EQ(curve[0].value, 1.0);
  EXPECT_FALSE(curve[1].value.has_value());
  EXPECT_NE(rejection_csv(curve).find("0.5,,2"), std::string::npos);
}

TEST(RejectionCurve, FloatingFractionsDropExpectedCounts) {
  const std::vector<double> v(10, 1.0), u(10, 0.5), q{0.1, 0.3, 0.7};
  const auto curve = rejection_curve(mean_metric(v), u, q);
  EXPECT_EQ(curve[0].n_retained, 9u);
  EXPECT_EQ(curve[1].n_retained, 7u);
  EXPECT_EQ(curve[2].n_retained, 3u);
}

}  // namespace
}  // namespace nnmil
