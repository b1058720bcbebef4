#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "max360iq/errors.hpp"
#include "max360iq/evaluation.hpp"
#include "max360iq/random.hpp"

using namespace max360iq;

namespace {

std::vector<double> draw(Rng& rng, std::size_t n, double lo = 1.0, double hi = 5.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

// Moments computed in long double, straight from the definition.
double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) mx += x[i], my += y[i];
  mx /= x.size();
  my /= y.size();
  long double a = 0, b = 0, c = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    a += (x[i] - mx) * (y[i] - my);
    b += (x[i] - mx) * (x[i] - mx);
    c += (y[i] - my) * (y[i] - my);
  }
  return static_cast<double>(a / std::sqrt(b * c));
}

// Rank of each entry by counting: smaller values plus half the equal others.
std::vector<double> rank_oracle(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0, equal = 0;
    for (double v : x) less += v < x[i], equal += v == x[i];
    r[i] = less + (equal + 1) / 2.0;
  }
  return r;
}

std::vector<double> map_each(const std::vector<double>& x, double (*f)(double)) {
  std::vector<double> out;
  for (double v : x) out.push_back(f(v));
  return out;
}

}  // namespace

TEST(Plcc, StatedExamples) {
  const std::vector<double> x{1, 2, 3, 4}, y{1, 2, 3, 5};
  EXPECT_NEAR(plcc(x, y), 6.5 / std::sqrt(43.75), 1e-14);
  EXPECT_NEAR(plcc(x, x), 1.0, 1e-15);
  const std::vector<double> neg{-1, -2, -3, -4};
  EXPECT_NEAR(plcc(x, neg), -1.0, 1e-15);
  const std::vector<double> c{2, 2, 2, 2};
  EXPECT_THROW(plcc(x, c), DegenerateInputError);
  EXPECT_THROW(plcc(std::vector<double>{1, 2}, std::vector<double>{1, 2}), PreconditionError);
  EXPECT_THROW(plcc(x, std::vector<double>{1, 2, 3}), PreconditionError);
}

TEST(Srcc, StatedExamples) {
  const std::vector<double> a{1, 2, 3}, b{1, 3, 2};
  EXPECT_DOUBLE_EQ(srcc(a, b), 0.5);
  const std::vector<double> inc{0.1, 7, 9, 30};
  EXPECT_DOUBLE_EQ(srcc(std::vector<double>{1, 2, 3, 4}, inc), 1.0);

  const std::vector<double> tx{1, 2, 2, 3}, ty{4, 1, 3, 2};
  EXPECT_NEAR(srcc(tx, ty), pearson_oracle(rank_oracle(tx), rank_oracle(ty)), 1e-12);
  EXPECT_THROW(srcc(std::vector<double>{5, 5, 5}, std::vector<double>{1, 2, 3}), DegenerateInputError);
}

TEST(Rmse, StatedExamples) {
  const std::vector<double> z{0, 0}, y{3, 4};
  EXPECT_NEAR(rmse(z, y), std::sqrt(12.5), 1e-15);
  EXPECT_EQ(rmse(y, y), 0.0);
  const std::vector<double> z3{0, 0}, y3{-9, -12};
  EXPECT_NEAR(rmse(z3, y3), 3 * rmse(z, y), 1e-14);
}

TEST(Metrics, MatchBruteForceOracles) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 3 + rng.below(60);
    auto x = draw(rng, n), y = draw(rng, n);
    // Quantize every other trial so ties appear.
    if (trial % 2)
      for (double& v : x) v = std::round(v * 2) / 2;
    EXPECT_NEAR(plcc(x, y), pearson_oracle(x, y), 1e-12);
    EXPECT_NEAR(srcc(x, y), pearson_oracle(rank_oracle(x), rank_oracle(y)), 1e-12);
    long double s = 0;
    for (std::size_t i = 0; i < n; ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
    EXPECT_NEAR(rmse(x, y), std::sqrt(static_cast<double>(s / n)), 1e-12);
    const auto r = average_ranks(x);
    const auto ro = rank_oracle(x);
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(r[i], ro[i]);
  }
}

TEST(Metrics, SymmetryPermutationAndMonotoneInvariance) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 3 + rng.below(40);
    auto x = draw(rng, n, 0.1, 5), y = draw(rng, n, 0.1, 5);
    EXPECT_NEAR(plcc(x, y), plcc(y, x), 1e-14);
    EXPECT_EQ(srcc(x, y), srcc(y, x));

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm);
    std::vector<double> xp, yp;
    for (std::size_t i : perm) xp.push_back(x[i]), yp.push_back(y[i]);
    EXPECT_NEAR(plcc(xp, yp), plcc(x, y), 1e-13);
    EXPECT_EQ(srcc(xp, yp), srcc(x, y));
    EXPECT_NEAR(rmse(xp, yp), rmse(x, y), 1e-13);

    // strictly increasing maps leave ranks untouched
    const auto up1 = map_each(x, [](double v) { return std::exp(3 * v); });
    const auto up2 = map_each(y, [](double v) { return std::log(v) + v * v * v; });
    EXPECT_EQ(srcc(up1, y), srcc(x, y));
    EXPECT_EQ(srcc(x, up2), srcc(x, y));
  }
}

TEST(Logistic, RecoversGeneratingCurve) {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const LogisticParams truth{rng.uniform(2, 4), rng.uniform(1, 3), rng.uniform(-0.5, 0.5),
                               rng.uniform(0, 0.3), rng.uniform(2, 3)};
    const auto pred = draw(rng, 60, -2, 2);
    std::vector<double> mos;
    for (double p : pred) mos.push_back(logistic5(truth, p));
    const LogisticFit fit = fit_logistic(pred, mos);
    EXPECT_FALSE(fit.fallback);
    double worst = 0;
    for (std::size_t i = 0; i < pred.size(); ++i)
      worst = std::max(worst, std::abs(fit.mapped[i] - mos[i]));
    EXPECT_LE(worst, 1e-6) << "trial " << trial;
  }
}

TEST(Logistic, IdentityIsReproduced) {
  Rng rng(14);
  const auto pred = draw(rng, 40);
  const LogisticFit fit = fit_logistic(pred, pred);
  EXPECT_LE(std::sqrt(fit.sse), 1e-8);
}

TEST(Logistic, NeverWorseThanUnmapped) {
  Rng rng(15);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 5 + rng.below(80);
    const auto pred = draw(rng, n), noise = draw(rng, n, -1, 1);
    std::vector<double> mos;
    for (std::size_t i = 0; i < n; ++i)
      mos.push_back(trial % 3 ? 0.6 * pred[i] + 1 + noise[i] : rng.uniform(1, 5));
    const LogisticFit fit = fit_logistic(pred, mos);
    EXPECT_LE(rmse(fit.mapped, mos), rmse(pred, mos) + 1e-12);
    for (double v : fit.mapped) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST(Logistic, DeterministicAndGuarded) {
  Rng rng(16);
  const auto pred = draw(rng, 30), mos = draw(rng, 30);
  const LogisticFit a = fit_logistic(pred, mos), b = fit_logistic(pred, mos);
  EXPECT_EQ(a.theta, b.theta);
  EXPECT_EQ(a.mapped, b.mapped);
  const std::vector<double> flat(6, 1.0), six(mos.begin(), mos.begin() + 6);
  EXPECT_THROW(fit_logistic(flat, six), DegenerateInputError);
  EXPECT_THROW(fit_logistic(std::vector<double>{1, 2, 3, 4}, std::vector<double>{1, 2, 3, 4}),
               PreconditionError);
}

TEST(Evaluate, PerfectPredictor) {
  Rng rng(17);
  const auto mos = draw(rng, 50);
  const EvalReport r = evaluate(mos, mos);
  EXPECT_NEAR(r.plcc, 1.0, 1e-12);
  EXPECT_EQ(r.srcc, 1.0);
  EXPECT_LE(r.rmse, 1e-8);
  EXPECT_EQ(r.n, 50u);
  EXPECT_TRUE(r.per_condition.empty());
}

TEST(Evaluate, PerConditionGrouping) {
  Rng rng(18);
  const std::size_t k = 12;
  std::vector<double> pred, mos;
  std::vector<std::optional<ViewingCondition>> cond;
  for (ViewingCondition c : kAllConditions)
    for (std::size_t i = 0; i < k; ++i) {
      const double m = rng.uniform(1, 5);
      mos.push_back(m);
      pred.push_back(m + rng.uniform(-0.5, 0.5));
      cond.push_back(c);
    }
  const EvalReport r = evaluate(pred, mos, cond);
  EXPECT_EQ(r.n, 4 * k);
  ASSERT_EQ(r.per_condition.size(), 4u);
  for (ViewingCondition c : kAllConditions) {
    const EvalReport& s = r.per_condition.at(c);
    EXPECT_EQ(s.n, k);
    const auto idx = std::find(std::begin(kAllConditions), std::end(kAllConditions), c) - std::begin(kAllConditions);
    const std::size_t off = k * static_cast<std::size_t>(idx);
    const std::vector<double> p(pred.begin() + off, pred.begin() + off + k), m(mos.begin() + off, mos.begin() + off + k);
    EXPECT_EQ(s.srcc, srcc(p, m));
  }

  const nlohmann::json j = report_to_json(r);
  EXPECT_EQ(j["n"], 4 * k);
  EXPECT_EQ(j["theta"].size(), 5u);
  EXPECT_EQ(j["per_condition"].size(), 4u);
  EXPECT_TRUE(j["per_condition"].contains(condition_name(ViewingCondition::Bad15s)));
  EXPECT_THROW(evaluate(pred, mos, std::span(cond).first(3)), PreconditionError);
}

TEST(Evaluate, SmallGroupsUseIdentityMap) {
  const std::vector<double> pred{1, 2, 3, 4, 5, 6, 7, 8}, mos{1, 3, 2, 4, 6, 5, 8, 7};
  std::vector<std::optional<ViewingCondition>> cond(8, ViewingCondition::Good5s);
  cond[5] = cond[6] = cond[7] = ViewingCondition::Bad5s;
  const EvalReport r = evaluate(pred, mos, cond);
  const EvalReport& small = r.per_condition.at(ViewingCondition::Bad5s);
  EXPECT_TRUE(small.logistic_fallback);
  EXPECT_EQ(small.n, 3u);
  EXPECT_EQ(small.rmse, rmse(std::vector<double>{6, 7, 8}, std::vector<double>{5, 8, 7}));
  EXPECT_FALSE(r.per_condition.at(ViewingCondition::Good5s).logistic_fallback);
}

TEST(Evaluate, NullCorrelation) {
  // seed 19, n = 1000
  Rng rng(19);
  const auto pred = draw(rng, 1000), mos = draw(rng, 1000);
  EXPECT_LT(std::abs(evaluate(pred, mos).srcc), 0.1);
}
