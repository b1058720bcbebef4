#include "max360iq/model.hpp"

#include "max360iq/errors.hpp"

namespace max360iq {

void ModelConfig::validate() const {
  backbone.validate(viewport_size);
  head.validate();
}

Model::Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(Rng::derive(seed, 0x1417));
  init_backbone(params_, cfg_.backbone, rng);
  init_head(params_, cfg_.head, cfg_.backbone, rng);
}

Model::Model(const ModelConfig& cfg, ParamStore params) : cfg_(cfg), params_(std::move(params)) {
  cfg_.validate();
  // Shapes must agree with a freshly initialized store.
  ParamStore ref;
  Rng rng(0);
  init_backbone(ref, cfg_.backbone, rng);
  init_head(ref, cfg_.head, cfg_.backbone, rng);
  if (ref.size() != params_.size())
    throw PreconditionError("model: parameter count " + std::to_string(params_.size()) +
                            " does not match config (" + std::to_string(ref.size()) + ")");
  for (const auto& e : ref) {
    if (!params_.contains(e->name)) throw PreconditionError("model: missing parameter " + e->name);
    const ParamEntry& p = params_.at(e->name);
    if (p.value.shape() != e->value.shape() || p.kind != e->kind)
      throw PreconditionError("model: parameter " + e->name + " has shape " +
                              shape_str(p.value.shape()) + ", expected " +
                              shape_str(e->value.shape()));
  }
}

Var model_step_scores(ParamStore& ps, const ModelConfig& cfg, const Var& viewports, bool train,
                      Rng& dropout_rng) {
  const Shape& s = viewports.shape();
  const std::size_t S = cfg.viewport_size;
  if (s.size() != 5 || s[2] != 3 || s[3] != S || s[4] != S)
    throw PreconditionError("model: expected [B,K,3," + std::to_string(S) + "," +
                            std::to_string(S) + "] viewports, got " + shape_str(s));
  const std::size_t B = s[0], K = s[1];
  Var flat = nd::reshape(viewports, {B * K, 3, S, S});
  FeaturePyramid pyr = backbone_forward(flat, ps, cfg.backbone, train);
  Var feats = head_features(pyr, ps, cfg.head);
  feats = nd::reshape(feats, {B, K, feats.shape()[1]});
  return regress_sequence(feats, ps, cfg.head, train, dropout_rng);
}

Var Model::step_scores(const Var& viewports, bool train, Rng& dropout_rng) {
  return model_step_scores(params_, cfg_, viewports, train, dropout_rng);
}

Var Model::sequence_scores(const Var& viewports, bool train, Rng& dropout_rng) {
  return nd::mean_axis(step_scores(viewports, train, dropout_rng), 1);
}

std::vector<double> Model::predict_sequences(const Tensor& viewports) {
  ad::NoGradGuard guard;
  Rng unused(0);
  Var s = sequence_scores(ad::constant(viewports), false, unused);
  return {s.value().data().begin(), s.value().data().end()};
}

}  // namespace max360iq
