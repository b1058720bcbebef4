#pragma once
// Viewport feature extractor: a convolutional stem followed by four stages of
// multi-axis attention blocks. Each stage ends with a 2x2 max-pool and the
// pooled output is kept as one level of the feature pyramid.

#include <array>
#include <cstddef>
#include <string>

#include "max360iq/ops.hpp"
#include "max360iq/param_store.hpp"
#include "max360iq/random.hpp"

namespace max360iq {

using ad::Var;

struct BackboneConfig {
  std::size_t stem_channels = 8;
  std::array<std::size_t, 4> stage_dims{8, 16, 32, 64};
  std::array<std::size_t, 4> stage_depths{1, 1, 1, 1};
  std::size_t window = 2;  // P, used for both block and grid partitions
  std::size_t heads = 2;
  double mbconv_expansion = 4.0;
  double se_ratio = 0.25;
  std::size_t mlp_ratio = 4;

  // Throws PreconditionError when the config is inconsistent or cannot
  // process square viewports of side `viewport_size`.
  void validate(std::size_t viewport_size) const;

  static BackboneConfig desk() { return {}; }
  // Larger variant meant for 224-pixel viewports. Not exercised by tests at scale.
  static BackboneConfig full();
};

// F[i] is [N, C_i, H_i, W_i], H_{i+1} = H_i / 2.
struct FeaturePyramid {
  std::array<Var, 4> F;
};

void init_backbone(ParamStore& ps, const BackboneConfig& cfg, Rng& rng);

// [N,3,S,S] -> [N,stem,S/2,S/2]
Var stem_forward(const Var& x, ParamStore& ps, const BackboneConfig& cfg, bool train);

// [N,C,H,W] -> [N*(H/P)*(W/P), P*P, C]. Window w holds a contiguous PxP tile.
Var block_partition(const Var& x, std::size_t P);
Var block_unpartition(const Var& windows, const Shape& nchw, std::size_t P);
// Same layout, but group g holds the PxP lattice of positions spaced H/P apart.
Var grid_partition(const Var& x, std::size_t P);
Var grid_unpartition(const Var& groups, const Shape& nchw, std::size_t P);

// Pre-norm multi-head self-attention within each window plus relative
// position bias, residual, then a pre-norm gelu MLP with residual.
// tokens: [B, P*P, C]. If `attn_weights` is set it receives the softmax
// output, shaped [B*heads, P*P, P*P].
Var window_attention(const Var& tokens, ParamStore& ps, const std::string& prefix,
                     const BackboneConfig& cfg, Tensor* attn_weights = nullptr);

Var mbconv_forward(const Var& x, ParamStore& ps, const std::string& prefix, std::size_t cin,
                   std::size_t cout, bool train);

// MBConv, then block attention, then grid attention. [N,cin,H,W] -> [N,cout,H,W]
Var maxvit_block_forward(const Var& x, ParamStore& ps, const std::string& prefix,
                         std::size_t cin, std::size_t cout, const BackboneConfig& cfg,
                         bool train);

FeaturePyramid backbone_forward(const Var& viewports, ParamStore& ps, const BackboneConfig& cfg,
                                bool train);

// Registration helpers, exposed so blocks can be tested in isolation.
void init_mbconv(ParamStore& ps, const std::string& prefix, std::size_t cin, std::size_t cout,
                 const BackboneConfig& cfg, Rng& rng);
void init_attention(ParamStore& ps, const std::string& prefix, std::size_t dim,
                    const BackboneConfig& cfg, Rng& rng);
void init_maxvit_block(ParamStore& ps, const std::string& prefix, std::size_t cin,
                       std::size_t cout, const BackboneConfig& cfg, Rng& rng);

// He-style truncated normal with std 1/sqrt(fan_in).
Tensor init_weight(const Shape& shape, std::size_t fan_in, Rng& rng);

}  // namespace max360iq
