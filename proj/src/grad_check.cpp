#include "max360iq/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "max360iq/errors.hpp"
#include "max360iq/random.hpp"

namespace max360iq {

namespace {
double evaluate(ParamStore& params, const ScalarFn& f) {
  ad::NoGradGuard no_grad;
  const ad::Var out = f(params);
  if (out.numel() != 1) throw PreconditionError("grad_check: f must return a scalar");
  const double v = out.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: f returned a non-finite value");
  return v;
}
}  // namespace

GradCheckResult grad_check(ParamStore& params, const ScalarFn& f, const GradCheckOptions& opt) {
  if (!(opt.eps >= 1e-7 && opt.eps <= 1e-4))
    throw PreconditionError("grad_check: eps must lie in [1e-7, 1e-4]");

  params.zero_grad();
  {
    const ad::Var out = f(params);
    if (out.numel() != 1) throw PreconditionError("grad_check: f must return a scalar");
    if (!std::isfinite(out.item())) throw NumericError("grad_check: f returned a non-finite value");
    ad::backward(out);
  }

  GradCheckResult result;
  Rng rng(opt.seed);
  std::vector<ParamEntry*> entries;
  for (auto& entry_ptr : params)
    if (entry_ptr->trainable()) entries.push_back(entry_ptr.get());
  if (opt.max_entries > 0 && entries.size() > opt.max_entries) {
    std::vector<std::size_t> pick(entries.size());
    std::iota(pick.begin(), pick.end(), std::size_t{0});
    rng.shuffle(pick);
    pick.resize(opt.max_entries);
    std::sort(pick.begin(), pick.end());
    std::vector<ParamEntry*> subset;
    for (std::size_t i : pick) subset.push_back(entries[i]);
    entries = std::move(subset);
  }
  for (ParamEntry* entry : entries) {
    ParamEntry& e = *entry;
    std::vector<std::size_t> coords;
    for (std::size_t i = 0; i < e.value.numel(); ++i) {
      if (opt.min_abs_grad > 0.0 && !(std::abs(e.grad[i]) >= opt.min_abs_grad)) {
        ++result.coords_below_min;
        continue;
      }
      coords.push_back(i);
    }
    if (opt.max_coords_per_entry > 0 && coords.size() > opt.max_coords_per_entry) {
      rng.shuffle(coords);
      coords.resize(opt.max_coords_per_entry);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double orig = e.value[i];
      e.value[i] = orig + opt.eps;
      const double fp = evaluate(params, f);
      e.value[i] = orig - opt.eps;
      const double fm = evaluate(params, f);
      e.value[i] = orig;
      const double numeric = (fp - fm) / (2.0 * opt.eps);
      const double analytic = e.grad[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic - numeric) / denom;
      ++result.coords_checked;
      if (rel > result.max_rel_error || result.worst_entry.empty()) {
        result.max_rel_error = std::max(result.max_rel_error, rel);
        if (rel >= result.max_rel_error) {
          result.worst_entry = e.name;
          result.worst_index = i;
          result.analytic = analytic;
          result.numeric = numeric;
        }
      }
    }
  }
  return result;
}

}  // namespace max360iq
