#pragma once
// PLCC / SRCC / RMSE with a five-parameter logistic remapping of predictions.

#include <array>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "max360iq/sphere.hpp"

namespace max360iq {

double plcc(std::span<const double> x, std::span<const double> y);
// Spearman. Tied values get average ranks; with ties the coefficient is the
// Pearson correlation of those ranks.
double srcc(std::span<const double> x, std::span<const double> y);
double rmse(std::span<const double> x, std::span<const double> y);
std::vector<double> average_ranks(std::span<const double> x);

using LogisticParams = std::array<double, 5>;

// t1 * (1/2 - 1/(1 + exp(t2 (x - t3)))) + t4 x + t5
double logistic5(const LogisticParams& t, double x);

struct LogisticFit {
  LogisticParams theta{};
  std::vector<double> mapped;
  double sse = 0.0;
  std::size_t iterations = 0;
  bool fallback = false;  // identity mapping used
};

// Damped Gauss-Newton (Levenberg-Marquardt) least squares. Runs from the
// data-driven start and from the identity map and keeps the lower residual.
LogisticFit fit_logistic(std::span<const double> pred, std::span<const double> mos);

struct EvalReport {
  double plcc = 0.0;
  double srcc = 0.0;
  double rmse = 0.0;
  LogisticParams theta{};
  std::size_t n = 0;
  bool logistic_fallback = false;
  std::map<ViewingCondition, EvalReport> per_condition;
  std::vector<double> mapped;
};

// PLCC and RMSE on logistic-mapped predictions, SRCC on raw predictions.
// Condition labels, when given, add one sub-report per condition present
// (groups smaller than 5 use the identity map).
EvalReport evaluate(std::span<const double> pred, std::span<const double> mos,
                    std::span<const std::optional<ViewingCondition>> conditions = {});

nlohmann::json report_to_json(const EvalReport& r);

}  // namespace max360iq
