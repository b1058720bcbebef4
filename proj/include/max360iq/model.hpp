#pragma once

#include <cstdint>

#include "max360iq/head.hpp"

namespace max360iq {

struct ModelConfig {
  BackboneConfig backbone;
  HeadConfig head;
  std::size_t viewport_size = 32;

  void validate() const;
};

// viewports [B, K, 3, S, S] -> per-viewport scores [B, K], over an explicit store.
Var model_step_scores(ParamStore& ps, const ModelConfig& cfg, const Var& viewports, bool train,
                      Rng& dropout_rng);

// Backbone + head sharing one parameter store.
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed);
  Model(const ModelConfig& cfg, ParamStore params);

  // viewports [B, K, 3, S, S] -> per-viewport scores [B, K]
  Var step_scores(const Var& viewports, bool train, Rng& dropout_rng);
  // Mean over K of step_scores. -> [B]
  Var sequence_scores(const Var& viewports, bool train, Rng& dropout_rng);
  // Eval mode, no graph.
  std::vector<double> predict_sequences(const Tensor& viewports);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

}  // namespace max360iq
