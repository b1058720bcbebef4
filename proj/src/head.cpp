#include "max360iq/head.hpp"

#include <cmath>
#include <numeric>
#include <vector>

#include "max360iq/errors.hpp"

namespace max360iq {

namespace {

const char* const kGemNames[4] = {"head.gem1.rho_raw", "head.gem2.rho_raw", "head.gem3.rho_raw",
                                  "head.gem4.rho_raw"};

std::string gru_name(std::size_t layer, const char* w) {
  return "head.gru" + std::to_string(layer + 1) + "." + w;
}

nd::GruWeights gru_weights(ParamStore& ps, std::size_t layer) {
  nd::GruWeights g;
  g.w_z = ps.var(gru_name(layer, "w_z"));
  g.w_r = ps.var(gru_name(layer, "w_r"));
  g.w_h = ps.var(gru_name(layer, "w_h"));
  g.u_z = ps.var(gru_name(layer, "u_z"));
  g.u_r = ps.var(gru_name(layer, "u_r"));
  g.u_h = ps.var(gru_name(layer, "u_h"));
  g.b_z = ps.var(gru_name(layer, "b_z"));
  g.b_r = ps.var(gru_name(layer, "b_r"));
  g.b_h = ps.var(gru_name(layer, "b_h"));
  return g;
}

}  // namespace

void HeadConfig::validate() const {
  if (!use_msfi && !use_dsg) throw PreconditionError("head: use_msfi and use_dsg cannot both be off");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw PreconditionError("head: dropout must lie in [0,1)");
  if (fc_hidden == 0) throw PreconditionError("head: fc_hidden must be positive");
  if (use_gru && (gru_layers == 0 || gru_hidden == 0))
    throw PreconditionError("head: GRU layers and hidden size must be positive");
}

std::size_t HeadConfig::feature_dim(const BackboneConfig& b) const {
  return (use_msfi ? fusion_out(b) : 0) + (use_dsg ? b.stage_dims[3] : 0);
}

double gem_rho_raw_init() { return std::log(std::expm1(2.0)); }

Var gem_rho(ParamStore& ps, const std::string& name) {
  return nd::shift(nd::softplus(ps.var(name)), 1.0);
}

void init_head(ParamStore& ps, const HeadConfig& h, const BackboneConfig& b, Rng& rng) {
  h.validate();
  const double raw = gem_rho_raw_init();
  if (h.use_msfi) {
    std::size_t total = 0;
    for (std::size_t i = 0; i < 4; ++i) {
      ps.add(kGemNames[i], ParamKind::Exponent, Tensor::scalar(raw));
      total += b.stage_dims[i];
    }
    const std::size_t dq = h.fusion_out(b);
    ps.add("head.fusion.w", ParamKind::Weight, init_weight({dq, total}, total, rng));
    ps.add("head.fusion.b", ParamKind::Bias, Tensor({dq}, 0.0));
  }
  if (h.use_dsg) ps.add("head.gem_g.rho_raw", ParamKind::Exponent, Tensor::scalar(raw));

  std::size_t din = h.feature_dim(b);
  if (h.use_gru) {
    ps.add("head.gru_norm.gamma", ParamKind::NormScale, Tensor({din}, 1.0));
    ps.add("head.gru_norm.beta", ParamKind::Bias, Tensor({din}, 0.0));
    const std::size_t H = h.gru_hidden;
    for (std::size_t l = 0; l < h.gru_layers; ++l) {
      for (const char* w : {"w_z", "w_r", "w_h"})
        ps.add(gru_name(l, w), ParamKind::Weight, init_weight({H, din}, din, rng));
      for (const char* u : {"u_z", "u_r", "u_h"})
        ps.add(gru_name(l, u), ParamKind::Weight, init_weight({H, H}, H, rng));
      for (const char* bb : {"b_z", "b_r", "b_h"})
        ps.add(gru_name(l, bb), ParamKind::Bias, Tensor({H}, 0.0));
      din = H;
    }
  }
  ps.add("head.fc1.w", ParamKind::Weight, init_weight({h.fc_hidden, din}, din, rng));
  ps.add("head.fc1.b", ParamKind::Bias, Tensor({h.fc_hidden}, 0.0));
  ps.add("head.fc2.w", ParamKind::Weight, init_weight({1, h.fc_hidden}, h.fc_hidden, rng));
  ps.add("head.fc2.b", ParamKind::Bias, Tensor({1}, 0.0));
}

Var msfi_fuse(const FeaturePyramid& pyr, ParamStore& ps) {
  std::vector<Var> pooled;
  for (std::size_t i = 0; i < 4; ++i) {
    if (!pyr.F[i]) throw PreconditionError("msfi: pyramid level missing");
    pooled.push_back(nd::gem_pool(pyr.F[i], gem_rho(ps, kGemNames[i])));
  }
  Var cat = nd::concat(pooled, 1);
  if (cat.shape()[1] != ps.at("head.fusion.w").value.dim(1))
    throw PreconditionError("msfi: pyramid channels " + shape_str(cat.shape()) +
                            " do not match the fusion layer");
  return nd::linear(cat, ps.var("head.fusion.w"), ps.var("head.fusion.b"));
}

Var dsg_concat(const FeaturePyramid& pyr, const Var& v_q, ParamStore& ps) {
  Var v_g = nd::gem_pool(pyr.F[3], gem_rho(ps, "head.gem_g.rho_raw"));
  if (!v_q) return v_g;
  const Var parts[2] = {v_q, v_g};
  return nd::concat(parts, 1);
}

Var head_features(const FeaturePyramid& pyr, ParamStore& ps, const HeadConfig& h) {
  h.validate();
  Var v_q = h.use_msfi ? msfi_fuse(pyr, ps) : Var();
  return h.use_dsg ? dsg_concat(pyr, v_q, ps) : v_q;
}

Var regress_sequence(const Var& feats, ParamStore& ps, const HeadConfig& h, bool train, Rng& rng) {
  if (feats.shape().size() != 3)
    throw PreconditionError("regress_sequence: expected [B,K,D], got " + shape_str(feats.shape()));
  const std::size_t B = feats.shape()[0], K = feats.shape()[1], D = feats.shape()[2];
  if (K == 0) throw PreconditionError("regress_sequence: empty sequence");
  const Var fc1w = ps.var("head.fc1.w"), fc1b = ps.var("head.fc1.b");
  const Var fc2w = ps.var("head.fc2.w"), fc2b = ps.var("head.fc2.b");
  auto regress = [&](const Var& x) {
    Var y = nd::gelu(nd::linear(x, fc1w, fc1b));
    y = nd::dropout(y, h.dropout, train, rng);
    return nd::linear(y, fc2w, fc2b);
  };
  if (!h.use_gru) return nd::reshape(regress(feats), {B, K});

  // Pooled features share a large common offset; normalizing them keeps the
  // gates out of saturation, without it the recurrent branch barely trains.
  const Var x_seq = nd::layer_norm(feats, ps.var("head.gru_norm.gamma"), ps.var("head.gru_norm.beta"));
  std::vector<nd::GruWeights> layers;
  for (std::size_t l = 0; l < h.gru_layers; ++l) layers.push_back(gru_weights(ps, l));
  std::vector<Var> state(h.gru_layers, ad::constant(Tensor({B, h.gru_hidden}, 0.0)));
  std::vector<Var> outs;
  for (std::size_t k = 0; k < K; ++k) {
    Var x = nd::reshape(nd::slice(x_seq, 1, k, k + 1), {B, D});
    for (std::size_t l = 0; l < h.gru_layers; ++l) {
      state[l] = nd::gru_cell(x, state[l], layers[l]);
      x = state[l];
    }
    outs.push_back(regress(x));  // [B,1]
  }
  return nd::concat(outs, 1);
}

double aggregate_sequence(std::span<const double> scores) {
  if (scores.empty()) throw PreconditionError("aggregate_sequence: no scores");
  return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

double aggregate_image(std::span<const double> sequence_scores) {
  if (sequence_scores.empty()) throw PreconditionError("aggregate_image: no sequences");
  return std::accumulate(sequence_scores.begin(), sequence_scores.end(), 0.0) /
         static_cast<double>(sequence_scores.size());
}

}  // namespace max360iq
