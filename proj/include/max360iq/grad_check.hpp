#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "max360iq/autograd.hpp"
#include "max360iq/param_store.hpp"

namespace max360iq {

struct GradCheckOptions {
  double eps = 1e-6;  // must lie in [1e-7, 1e-4]
  // 0 checks every coordinate; otherwise at most this many per entry,
  // chosen deterministically from `seed`.
  std::size_t max_coords_per_entry = 0;
  // 0 checks every trainable entry; otherwise a seeded subset of this size.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
  // When > 0, coordinates are drawn only from those whose analytic partial
  // is at least this large. Partials far below the loss's round-off divided
  // by 2*eps cannot be resolved by a central difference.
  double min_abs_grad = 0.0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_entry;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
  std::size_t coords_below_min = 0;  // excluded by min_abs_grad
};

using ScalarFn = std::function<ad::Var(ParamStore&)>;

/// Compares reverse-mode gradients of every trainable entry against central
/// differences. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
/// denominator. `f` must be deterministic and return a single-element Var.
GradCheckResult grad_check(ParamStore& params, const ScalarFn& f,
                           const GradCheckOptions& opt = {});

}  // namespace max360iq
