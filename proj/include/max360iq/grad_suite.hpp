#pragma once
// Finite-difference verification of every differentiable primitive, the
// model building blocks and the end-to-end tiny model.

#include <functional>
#include <string>
#include <vector>

#include "max360iq/grad_check.hpp"
#include "max360iq/random.hpp"

namespace max360iq {

// Builds its inputs into `ps` and returns the scalar function to check.
struct GradCase {
  std::string name;
  double threshold = 1e-4;
  GradCheckOptions options;
  std::function<ScalarFn(ParamStore&, Rng&)> build;
};

std::vector<GradCase> primitive_grad_cases();
std::vector<GradCase> model_grad_cases();  // blocks, head, loss model, end-to-end

struct GradComponentResult {
  std::string name;
  double threshold = 0.0;
  double max_rel_error = 0.0;
  std::size_t runs = 0;
  std::string worst;  // entry[index] @ seed of the largest error
  std::size_t coords = 0;      // coordinates compared over all runs
  std::size_t below_min = 0;   // excluded by the case's min_abs_grad
  bool passed() const { return coords > 0 && max_rel_error <= threshold; }
};

struct GradSuiteOptions {
  std::size_t seeds = 20;
  std::uint64_t base_seed = 1000;
  bool primitives = true;
  bool models = true;
};

std::vector<GradComponentResult> run_grad_suite(const GradSuiteOptions& opt = {});

}  // namespace max360iq
