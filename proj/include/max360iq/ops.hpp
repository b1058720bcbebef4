#pragma once

// Differentiable primitives. Every function returns a new Var; gradients flow
// to any argument that requires them. Image tensors are NCHW.

#include <cstddef>
#include <memory>
#include <span>
#include <vector>

#include "max360iq/autograd.hpp"
#include "max360iq/random.hpp"

namespace max360iq::nd {

using ad::Var;

// Elementwise, identical shapes.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);

// x[i] op y[i % y.numel()]; y.numel() must divide x.numel(). Covers scalar
// and trailing-block broadcasting.
Var add_tiled(const Var& x, const Var& y);
Var mul_tiled(const Var& x, const Var& y);

Var scale(const Var& x, double c);
Var shift(const Var& x, double c);

Var relu(const Var& x);
Var gelu(const Var& x);  // exact erf form
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var softplus(const Var& x);
Var abs(const Var& x);
// x^p. Non-integer p requires x >= 0.
Var pow(const Var& x, double p);

Var sum(const Var& x);   // -> shape {1}
Var mean(const Var& x);  // -> shape {1}
// Mean over one axis; the axis is removed ({1} if nothing is left).
Var mean_axis(const Var& x, std::size_t axis);

Var reshape(const Var& x, Shape shape);
// out[i] = x[index[i]], out has `shape`. Backward scatter-adds.
Var gather(const Var& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);
Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end);

// y = x W^T + b over the last axis. `b` may be an empty Var.
Var linear(const Var& x, const Var& w, const Var& b);
// [B,M,K] x [B,K,N] -> [B,M,N]
Var matmul(const Var& a, const Var& b);
// [B,M,K] x [B,N,K]^T -> [B,M,N]
Var matmul_bt(const Var& a, const Var& b);

// Max-subtracted softmax along `axis`.
Var softmax(const Var& x, std::size_t axis);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);  // last axis

Var conv2d(const Var& x, const Var& kernel, const Var& bias, std::size_t stride,
           std::size_t padding);
// kernel [C,1,k,k]
Var depthwise_conv2d(const Var& x, const Var& kernel, const Var& bias, std::size_t stride,
                     std::size_t padding);

struct BatchNormOptions {
  bool train = false;
  double momentum = 0.1;
  double eps = 1e-5;
};
// Train mode normalizes with batch statistics and updates the running
// statistics in place (unbiased variance); eval mode uses the running ones.
Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                 Tensor& running_var, const BatchNormOptions& opt);

Var max_pool2d(const Var& x);        // 2x2, stride 2
Var global_avg_pool(const Var& x);   // [N,C,H,W] -> [N,C]
Var mul_channel(const Var& x, const Var& s);  // [N,C,H,W] * [N,C]

// Inverted dropout: Bernoulli keep-mask scaled by 1/(1-rate) in train mode,
// identity otherwise.
Var dropout(const Var& x, double rate, bool train, Rng& rng);

// Generalized-mean pooling over H,W per channel: (mean(max(x,clamp)^rho))^(1/rho).
// rho is a single-element Var. [N,C,H,W] -> [N,C].
Var gem_pool(const Var& x, const Var& rho, double clamp = 1e-6);

// Squeeze-excite gate: x * sigmoid(W2 gelu(W1 avgpool(x) + b1) + b2).
Var squeeze_excite(const Var& x, const Var& w1, const Var& b1, const Var& w2, const Var& b2);

struct GruWeights {
  Var w_z, w_r, w_h;  // [H, Din]
  Var u_z, u_r, u_h;  // [H, H]
  Var b_z, b_r, b_h;  // [H]
};
// z = s(Wz x + Uz h + bz); r = s(Wr x + Ur h + br);
// h~ = tanh(Wh x + Uh (r*h) + bh); h' = (1 - z) h + z h~
Var gru_cell(const Var& x, const Var& h, const GruWeights& w);

namespace test_hooks {
// Multiplies the gelu backward pass by `factor`; 1.0 restores correct gradients.
void set_gelu_backward_scale(double factor);
}  // namespace test_hooks

}  // namespace max360iq::nd
