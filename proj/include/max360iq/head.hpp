#pragma once
// Quality head: GeM pooling of the pyramid, multi-scale fusion, deep semantic
// guidance, optional GRU over the viewport sequence, and two FC layers.

#include <cstddef>
#include <span>
#include <string>

#include "max360iq/backbone.hpp"

namespace max360iq {

struct HeadConfig {
  bool use_msfi = true;
  bool use_dsg = true;
  bool use_gru = true;
  std::size_t gru_layers = 1;
  std::size_t gru_hidden = 32;
  std::size_t fc_hidden = 32;
  double dropout = 0.1;
  std::size_t fusion_dim = 0;  // 0 means C4

  void validate() const;
  std::size_t fusion_out(const BackboneConfig& b) const { return fusion_dim ? fusion_dim : b.stage_dims[3]; }
  // Length of the per-viewport feature fed to the regressor.
  std::size_t feature_dim(const BackboneConfig& b) const;
};

// raw value that makes 1 + softplus(raw) equal 3
double gem_rho_raw_init();

// rho = 1 + softplus(raw) for the named exponent parameter
Var gem_rho(ParamStore& ps, const std::string& name);

void init_head(ParamStore& ps, const HeadConfig& h, const BackboneConfig& b, Rng& rng);

// Concatenated GeM vectors of F1..F4 followed by one FC layer. -> [N, D_q]
Var msfi_fuse(const FeaturePyramid& pyr, ParamStore& ps);
// [v_q, GeM(F4)] -> [N, D_q + C4]. An empty v_q yields GeM(F4) alone.
Var dsg_concat(const FeaturePyramid& pyr, const Var& v_q, ParamStore& ps);
// Per-viewport feature honoring the use_msfi/use_dsg toggles. -> [N, D]
Var head_features(const FeaturePyramid& pyr, ParamStore& ps, const HeadConfig& h);

// feats [B, K, D] -> per-step scores [B, K]. With use_gru the GRU stack runs
// over k = 0..K-1 from a zero state, on layer-normalized features; otherwise
// the FC layers act per step.
// Dropout after FC1 is active only when train is set.
Var regress_sequence(const Var& feats, ParamStore& ps, const HeadConfig& h, bool train, Rng& rng);

double aggregate_sequence(std::span<const double> scores);
double aggregate_image(std::span<const double> sequence_scores);

}  // namespace max360iq
