#pragma once

#include <cmath>
#include <vector>

#include "max360iq/autograd.hpp"
#include "max360iq/ops.hpp"
#include "max360iq/param_store.hpp"
#include "max360iq/random.hpp"
#include "max360iq/tensor.hpp"

namespace max360iq::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Fixed random projection to a scalar, so every output coordinate carries a
// distinct weight in the loss.
struct Projector {
  Tensor weights;
  ad::Var operator()(const ad::Var& y) const {
    return nd::sum(nd::mul(y, ad::constant(weights.reshaped(y.shape()))));
  }
};

inline Projector projector_for(const Shape& shape, Rng& rng) {
  return Projector{random_tensor(shape, rng, -1.0, 1.0)};
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace max360iq::testing
