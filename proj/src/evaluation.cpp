#include "max360iq/evaluation.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "max360iq/errors.hpp"

namespace max360iq {

namespace {

void require_aligned(std::span<const double> x, std::span<const double> y, std::size_t min_n,
                     const char* what) {
  if (x.size() != y.size())
    throw PreconditionError(std::string(what) + ": length mismatch " + std::to_string(x.size()) +
                            " vs " + std::to_string(y.size()));
  if (x.size() < min_n)
    throw PreconditionError(std::string(what) + ": needs at least " + std::to_string(min_n) +
                            " samples");
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i]) || !std::isfinite(y[i]))
      throw PreconditionError(std::string(what) + ": non-finite value at " + std::to_string(i));
}

double mean_of(std::span<const double> v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double pearson(std::span<const double> x, std::span<const double> y, const char* what) {
  const double mx = mean_of(x), my = mean_of(y);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0)
    throw DegenerateInputError(std::string(what) + ": constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double sse_of(const LogisticParams& t, std::span<const double> x, std::span<const double> y) {
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = logistic5(t, x[i]) - y[i];
    s += r * r;
  }
  return s;
}

// 1 / (1 + exp(z)) without overflow
double inv_one_plus_exp(double z) {
  if (z > 0) {
    const double e = std::exp(-z);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(z));
}

struct LmResult {
  LogisticParams theta;
  double sse;
  std::size_t iterations;
  bool singular;
};

LmResult levenberg_marquardt(LogisticParams t, std::span<const double> x,
                             std::span<const double> y) {
  using Mat = Eigen::Matrix<double, 5, 5>;
  using Vec = Eigen::Matrix<double, 5, 1>;
  double sse = sse_of(t, x, y);
  double lambda = 1e-3;
  std::size_t it = 0;
  bool singular = false;
  for (; it < 500; ++it) {
    Mat A = Mat::Zero();
    Vec g = Vec::Zero();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = x[i] - t[2];
      const double s = inv_one_plus_exp(t[1] * d);
      const double ds = s * (1.0 - s);
      Vec j;
      j << 0.5 - s, t[0] * ds * d, -t[0] * ds * t[1], x[i], 1.0;
      const double r = logistic5(t, x[i]) - y[i];
      A.noalias() += j * j.transpose();
      g += j * r;
    }
    const double floor = 1e-12 * std::max(1.0, A.diagonal().maxCoeff());
    bool accepted = false;
    while (lambda < 1e16) {
      Mat M = A;
      for (int k = 0; k < 5; ++k) M(k, k) += lambda * std::max(A(k, k), floor);
      Eigen::LDLT<Mat> ldlt(M);
      Vec step = ldlt.solve(-g);
      if (ldlt.info() != Eigen::Success || !step.allFinite()) {
        singular = true;
        lambda *= 10;
        continue;
      }
      LogisticParams cand = t;
      for (int k = 0; k < 5; ++k) cand[k] += step(k);
      const double cand_sse = sse_of(cand, x, y);
      if (std::isfinite(cand_sse) && cand_sse <= sse) {
        const double rel = (sse - cand_sse) / std::max(sse, std::numeric_limits<double>::min());
        t = cand;
        sse = cand_sse;
        lambda = std::max(lambda / 10, 1e-12);
        accepted = true;
        if (rel < 1e-10) return {t, sse, it + 1, singular};
        break;
      }
      lambda *= 10;
    }
    if (!accepted) break;
  }
  return {t, sse, it, singular};
}

}  // namespace

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double plcc(std::span<const double> x, std::span<const double> y) {
  require_aligned(x, y, 3, "plcc");
  return pearson(x, y, "plcc");
}

double srcc(std::span<const double> x, std::span<const double> y) {
  require_aligned(x, y, 3, "srcc");
  const std::vector<double> rx = average_ranks(x), ry = average_ranks(y);
  auto tied = [](const std::vector<double>& r) {
    return std::any_of(r.begin(), r.end(), [](double v) { return v != std::floor(v); }) ||
           [&] {
             std::vector<double> s = r;
             std::sort(s.begin(), s.end());
             return std::adjacent_find(s.begin(), s.end()) != s.end();
           }();
  };
  if (!tied(rx) && !tied(ry)) {
    const double n = static_cast<double>(x.size());
    double d2 = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
    return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
  }
  return pearson(rx, ry, "srcc");
}

double rmse(std::span<const double> x, std::span<const double> y) {
  require_aligned(x, y, 1, "rmse");
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(s / static_cast<double>(x.size()));
}

double logistic5(const LogisticParams& t, double x) {
  return t[0] * (0.5 - inv_one_plus_exp(t[1] * (x - t[2]))) + t[3] * x + t[4];
}

LogisticFit fit_logistic(std::span<const double> pred, std::span<const double> mos) {
  require_aligned(pred, mos, 5, "fit_logistic");
  const auto [pmin, pmax] = std::minmax_element(pred.begin(), pred.end());
  const auto [mmin, mmax] = std::minmax_element(mos.begin(), mos.end());
  const double range = *pmax - *pmin;
  if (!(range > 0.0)) throw DegenerateInputError("fit_logistic: constant predictions");
  const double slope = 4.0 / std::max(range, 1e-12);
  const double pm = mean_of(pred), mm = mean_of(mos);

  const LmResult a = levenberg_marquardt({*mmax - *mmin, slope, pm, 0.0, mm}, pred, mos);
  const LmResult b = levenberg_marquardt({0.0, slope, pm, 1.0, 0.0}, pred, mos);
  const LmResult& best = (std::isfinite(b.sse) && !(a.sse <= b.sse)) ? b : a;

  LogisticFit fit;
  if (!std::isfinite(best.sse) || (a.singular && b.singular && best.iterations == 0)) {
    fit.theta = {0.0, slope, pm, 1.0, 0.0};
    fit.fallback = true;
  } else {
    fit.theta = best.theta;
    fit.iterations = best.iterations;
  }
  for (double p : pred) fit.mapped.push_back(logistic5(fit.theta, p));
  fit.sse = sse_of(fit.theta, pred, mos);
  return fit;
}

namespace {

EvalReport evaluate_group(std::span<const double> pred, std::span<const double> mos) {
  EvalReport r;
  r.n = pred.size();
  if (pred.size() >= 5) {
    LogisticFit fit = fit_logistic(pred, mos);
    r.theta = fit.theta;
    r.logistic_fallback = fit.fallback;
    r.mapped = std::move(fit.mapped);
  } else {
    r.theta = {0.0, 0.0, 0.0, 1.0, 0.0};
    r.logistic_fallback = true;
    r.mapped.assign(pred.begin(), pred.end());
  }
  r.plcc = plcc(r.mapped, mos);
  r.srcc = srcc(pred, mos);
  r.rmse = rmse(r.mapped, mos);
  return r;
}

}  // namespace

EvalReport evaluate(std::span<const double> pred, std::span<const double> mos,
                    std::span<const std::optional<ViewingCondition>> conditions) {
  require_aligned(pred, mos, 3, "evaluate");
  if (!conditions.empty() && conditions.size() != pred.size())
    throw PreconditionError("evaluate: condition labels do not align with predictions");
  EvalReport r = evaluate_group(pred, mos);
  for (ViewingCondition c : kAllConditions) {
    std::vector<double> p, m;
    for (std::size_t i = 0; i < conditions.size(); ++i)
      if (conditions[i] == c) p.push_back(pred[i]), m.push_back(mos[i]);
    if (p.size() >= 3) r.per_condition.emplace(c, evaluate_group(p, m));
  }
  return r;
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["plcc"] = r.plcc;
  j["srcc"] = r.srcc;
  j["rmse"] = r.rmse;
  j["theta"] = r.theta;
  j["n"] = r.n;
  j["logistic_fallback"] = r.logistic_fallback;
  if (!r.per_condition.empty()) {
    nlohmann::json sub = nlohmann::json::object();
    for (const auto& [c, s] : r.per_condition) sub[std::string(condition_name(c))] = report_to_json(s);
    j["per_condition"] = sub;
  }
  return j;
}

}  // namespace max360iq
