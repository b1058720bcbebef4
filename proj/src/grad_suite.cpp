#include "max360iq/grad_suite.hpp"

#include <algorithm>
#include <cstdio>

#include "max360iq/backbone.hpp"
#include "max360iq/head.hpp"
#include "max360iq/model.hpp"
#include "max360iq/objective.hpp"
#include "max360iq/ops.hpp"

namespace max360iq {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

ad::Var C(Tensor t) { return ad::constant(std::move(t)); }

// Fixed random projection to a scalar, so every output coordinate carries a
// distinct weight.
struct Projector {
  Tensor weights;
  ad::Var operator()(const ad::Var& y) const {
    return nd::sum(nd::mul(y, ad::constant(weights.reshaped(y.shape()))));
  }
};

Projector projector_for(const Shape& shape, Rng& rng) { return Projector{random_tensor(shape, rng)}; }

ParamStore subset(const ParamStore& ps, const std::string& prefix) {
  ParamStore out;
  for (const auto& e : ps)
    if (e->name.rfind(prefix, 0) == 0) out.add(e->name, e->kind, e->value);
  return out;
}

// Moves parameters and running statistics off their structured init
// (zero biases, unit scales) so no gradient vanishes by symmetry.
void jitter(ParamStore& ps, Rng& rng, double amount) {
  for (auto& e : ps)
    for (double& v : e->value.data()) {
      v += rng.uniform(-amount, amount);
      if (e->name.ends_with("running_var")) v = std::abs(v) + 0.5;
    }
}

}  // namespace

std::vector<GradCase> primitive_grad_cases() {
  auto dims = [](Rng& rng, std::size_t lo, std::size_t hi) {
    return static_cast<std::size_t>(lo + rng.below(hi - lo + 1));
  };
  std::vector<GradCase> cases;
  auto binary = [&](std::string name, auto op) {
    cases.push_back({name, 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                       Shape s{dims(rng, 1, 4), dims(rng, 1, 5)};
                       ps.add("a", ParamKind::Weight, random_tensor(s, rng));
                       ps.add("b", ParamKind::Weight, random_tensor(s, rng));
                       auto proj = projector_for(s, rng);
                       return [=](ParamStore& p) { return proj(op(p.var("a"), p.var("b"))); };
                     }});
  };
  binary("add", [](const ad::Var& a, const ad::Var& b) { return nd::add(a, b); });
  binary("sub", [](const ad::Var& a, const ad::Var& b) { return nd::sub(a, b); });
  binary("mul", [](const ad::Var& a, const ad::Var& b) { return nd::mul(a, b); });

  auto tiled = [&](std::string name, auto op) {
    cases.push_back({name, 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                       const std::size_t inner = dims(rng, 1, 4);
                       Shape s{dims(rng, 1, 3), inner};
                       ps.add("x", ParamKind::Weight, random_tensor(s, rng));
                       ps.add("y", ParamKind::Weight, random_tensor({inner}, rng));
                       auto proj = projector_for(s, rng);
                       return [=](ParamStore& p) { return proj(op(p.var("x"), p.var("y"))); };
                     }});
  };
  tiled("add_tiled", [](const ad::Var& a, const ad::Var& b) { return nd::add_tiled(a, b); });
  tiled("mul_tiled", [](const ad::Var& a, const ad::Var& b) { return nd::mul_tiled(a, b); });

  auto unary = [&](std::string name, double lo, double hi, auto op) {
    cases.push_back({name, 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                       Shape s{dims(rng, 1, 3), dims(rng, 2, 6)};
                       ps.add("x", ParamKind::Weight, random_tensor(s, rng, lo, hi));
                       auto proj = projector_for(op(C(ps.at("x").value)).shape(), rng);
                       return [=](ParamStore& p) { return proj(op(p.var("x"))); };
                     }});
  };
  unary("gelu", -3, 3, [](const ad::Var& x) { return nd::gelu(x); });
  unary("sigmoid", -4, 4, [](const ad::Var& x) { return nd::sigmoid(x); });
  unary("tanh", -2, 2, [](const ad::Var& x) { return nd::tanh(x); });
  unary("relu", -2, 2, [](const ad::Var& x) { return nd::relu(x); });
  unary("softplus", -3, 3, [](const ad::Var& x) { return nd::softplus(x); });
  unary("abs", -2, 2, [](const ad::Var& x) { return nd::abs(x); });
  unary("pow_frac", 0.2, 2, [](const ad::Var& x) { return nd::pow(x, 2.5); });
  unary("pow_int", -2, 2, [](const ad::Var& x) { return nd::pow(x, 3.0); });
  unary("scale_shift", -2, 2, [](const ad::Var& x) { return nd::shift(nd::scale(x, -1.7), 0.3); });
  unary("mean", -2, 2, [](const ad::Var& x) { return nd::scale(nd::mean(x), 3.0); });
  unary("mean_axis", -2, 2, [](const ad::Var& x) { return nd::mean_axis(x, 1); });
  unary("softmax", -3, 3, [](const ad::Var& x) { return nd::softmax(x, 1); });
  unary("slice", -2, 2, [](const ad::Var& x) { return nd::slice(x, 1, 1, x.shape()[1]); });

  cases.push_back({"concat", 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const std::size_t r = dims(rng, 1, 3);
                     ps.add("a", ParamKind::Weight, random_tensor({r, dims(rng, 1, 3)}, rng));
                     ps.add("b", ParamKind::Weight, random_tensor({r, dims(rng, 1, 3)}, rng));
                     const std::size_t total = ps.at("a").value.dim(1) + ps.at("b").value.dim(1);
                     auto proj = projector_for({r, total}, rng);
                     return [=](ParamStore& p) {
                       std::vector<ad::Var> parts{p.var("a"), p.var("b")};
                       return proj(nd::concat(parts, 1));
                     };
                   }});
  cases.push_back({"linear", 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const std::size_t m = dims(rng, 1, 4), din = dims(rng, 1, 5),
                                       dout = dims(rng, 1, 4);
                     ps.add("x", ParamKind::Weight, random_tensor({m, din}, rng));
                     ps.add("w", ParamKind::Weight, random_tensor({dout, din}, rng));
                     ps.add("b", ParamKind::Bias, random_tensor({dout}, rng));
                     auto proj = projector_for({m, dout}, rng);
                     return [=](ParamStore& p) {
                       return proj(nd::linear(p.var("x"), p.var("w"), p.var("b")));
                     };
                   }});
  cases.push_back({"matmul", 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const std::size_t B = dims(rng, 1, 2), M = dims(rng, 1, 3),
                                       K = dims(rng, 1, 4), N = dims(rng, 1, 3);
                     ps.add("a", ParamKind::Weight, random_tensor({B, M, K}, rng));
                     ps.add("b", ParamKind::Weight, random_tensor({B, K, N}, rng));
                     ps.add("c", ParamKind::Weight, random_tensor({B, N, K}, rng));
                     auto p1 = projector_for({B, M, N}, rng);
                     auto p2 = projector_for({B, M, N}, rng);
                     return [=](ParamStore& p) {
                       return nd::add(p1(nd::matmul(p.var("a"), p.var("b"))),
                                      p2(nd::matmul_bt(p.var("a"), p.var("c"))));
                     };
                   }});
  cases.push_back({"layer_norm", 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const std::size_t m = dims(rng, 1, 4), c = dims(rng, 2, 6);
                     ps.add("x", ParamKind::Weight, random_tensor({m, c}, rng));
                     ps.add("g", ParamKind::NormScale, random_tensor({c}, rng, 0.5, 1.5));
                     ps.add("b", ParamKind::NormScale, random_tensor({c}, rng));
                     auto proj = projector_for({m, c}, rng);
                     return [=](ParamStore& p) {
                       return proj(nd::layer_norm(p.var("x"), p.var("g"), p.var("b")));
                     };
                   }});
  cases.push_back({"conv2d", 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const std::size_t ci = dims(rng, 1, 3), co = dims(rng, 1, 3),
                                       h = dims(rng, 3, 6), w = dims(rng, 3, 6),
                                       stride = dims(rng, 1, 2), pad = dims(rng, 0, 1);
                     ps.add("x", ParamKind::Weight, random_tensor({2, ci, h, w}, rng));
                     ps.add("k", ParamKind::Weight, random_tensor({co, ci, 3, 3}, rng));
                     ps.add("b", ParamKind::Bias, random_tensor({co}, rng));
                     const Shape os{2, co, (h + 2 * pad - 3) / stride + 1,
                                    (w + 2 * pad - 3) / stride + 1};
                     auto proj = projector_for(os, rng);
                     return [=](ParamStore& p) {
                       return proj(nd::conv2d(p.var("x"), p.var("k"), p.var("b"), stride, pad));
                     };
                   }});
  cases.push_back({"depthwise_conv2d", 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const std::size_t c = dims(rng, 1, 4), h = dims(rng, 3, 6),
                                       w = dims(rng, 3, 6), stride = dims(rng, 1, 2);
                     ps.add("x", ParamKind::Weight, random_tensor({2, c, h, w}, rng));
                     ps.add("k", ParamKind::Weight, random_tensor({c, 1, 3, 3}, rng));
                     ps.add("b", ParamKind::Bias, random_tensor({c}, rng));
                     const Shape os{2, c, (h + 2 - 3) / stride + 1, (w + 2 - 3) / stride + 1};
                     auto proj = projector_for(os, rng);
                     return [=](ParamStore& p) {
                       return proj(
                           nd::depthwise_conv2d(p.var("x"), p.var("k"), p.var("b"), stride, 1));
                     };
                   }});
  for (bool train : {true, false}) {
    cases.push_back({train ? "batch_norm_train" : "batch_norm_eval", 1e-4, {},
                     [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                       const std::size_t c = dims(rng, 1, 3);
                       const Shape s{2, c, dims(rng, 2, 4), dims(rng, 2, 4)};
                       ps.add("x", ParamKind::Weight, random_tensor(s, rng));
                       ps.add("g", ParamKind::NormScale, random_tensor({c}, rng, 0.5, 1.5));
                       ps.add("b", ParamKind::NormScale, random_tensor({c}, rng));
                       ps.add("rm", ParamKind::Buffer, random_tensor({c}, rng, -0.2, 0.2));
                       ps.add("rv", ParamKind::Buffer, random_tensor({c}, rng, 0.5, 1.5));
                       auto proj = projector_for(s, rng);
                       return [=](ParamStore& p) {
                         return proj(nd::batch_norm2d(p.var("x"), p.var("g"), p.var("b"),
                                                      p.at("rm").value, p.at("rv").value,
                                                      {.train = train}));
                       };
                     }});
  }
  auto image_unary = [&](std::string name, double lo, double hi, auto op, auto out_shape) {
    cases.push_back({name, 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                       const Shape s{dims(rng, 1, 2), dims(rng, 1, 3), 2 * dims(rng, 1, 3),
                                     2 * dims(rng, 1, 3)};
                       ps.add("x", ParamKind::Weight, random_tensor(s, rng, lo, hi));
                       auto proj = projector_for(out_shape(s), rng);
                       return [=](ParamStore& p) { return proj(op(p.var("x"))); };
                     }});
  };
  image_unary(
      "max_pool2d", -1, 1, [](const ad::Var& x) { return nd::max_pool2d(x); },
      [](const Shape& s) { return Shape{s[0], s[1], s[2] / 2, s[3] / 2}; });
  image_unary(
      "global_avg_pool", -1, 1, [](const ad::Var& x) { return nd::global_avg_pool(x); },
      [](const Shape& s) { return Shape{s[0], s[1]}; });
  cases.push_back({"mul_channel", 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const Shape s{2, dims(rng, 1, 3), 2, dims(rng, 1, 3)};
                     ps.add("x", ParamKind::Weight, random_tensor(s, rng));
                     ps.add("s", ParamKind::Weight, random_tensor({2, s[1]}, rng));
                     auto proj = projector_for(s, rng);
                     return [=](ParamStore& p) {
                       return proj(nd::mul_channel(p.var("x"), p.var("s")));
                     };
                   }});
  cases.push_back({"gem_pool", 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const Shape s{2, dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 2, 4)};
                     ps.add("x", ParamKind::Weight, random_tensor(s, rng, 0.1, 1.0));
                     ps.add("rho", ParamKind::Exponent, Tensor::scalar(rng.uniform(1.2, 4.0)));
                     auto proj = projector_for({s[0], s[1]}, rng);
                     return [=](ParamStore& p) {
                       return proj(nd::gem_pool(p.var("x"), p.var("rho")));
                     };
                   }});
  cases.push_back({"squeeze_excite", 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const std::size_t c = dims(rng, 2, 4), r = dims(rng, 1, 2);
                     const Shape s{2, c, 2, 3};
                     ps.add("x", ParamKind::Weight, random_tensor(s, rng));
                     ps.add("w1", ParamKind::Weight, random_tensor({r, c}, rng));
                     ps.add("b1", ParamKind::Bias, random_tensor({r}, rng));
                     ps.add("w2", ParamKind::Weight, random_tensor({c, r}, rng));
                     ps.add("b2", ParamKind::Bias, random_tensor({c}, rng));
                     auto proj = projector_for(s, rng);
                     return [=](ParamStore& p) {
                       return proj(nd::squeeze_excite(p.var("x"), p.var("w1"), p.var("b1"),
                                                      p.var("w2"), p.var("b2")));
                     };
                   }});
  cases.push_back({"gru_cell", 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const std::size_t B = dims(rng, 1, 3), din = dims(rng, 1, 4),
                                       dh = dims(rng, 1, 4);
                     ps.add("x", ParamKind::Weight, random_tensor({B, din}, rng));
                     ps.add("h", ParamKind::Weight, random_tensor({B, dh}, rng));
                     for (const char* g : {"z", "r", "h"}) {
                       ps.add(std::string("W") + g, ParamKind::Weight, random_tensor({dh, din}, rng));
                       ps.add(std::string("U") + g, ParamKind::Weight, random_tensor({dh, dh}, rng));
                       ps.add(std::string("b") + g, ParamKind::Bias, random_tensor({dh}, rng));
                     }
                     auto proj = projector_for({B, dh}, rng);
                     return [=](ParamStore& p) {
                       nd::GruWeights w{p.var("Wz"), p.var("Wr"), p.var("Wh"),
                                        p.var("Uz"), p.var("Ur"), p.var("Uh"),
                                        p.var("bz"), p.var("br"), p.var("bh")};
                       return proj(nd::gru_cell(p.var("x"), p.var("h"), w));
                     };
                   }});
  cases.push_back({"dropout_train", 1e-4, {}, [=](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const Shape s{3, dims(rng, 2, 6)};
                     ps.add("x", ParamKind::Weight, random_tensor(s, rng));
                     auto proj = projector_for(s, rng);
                     const std::uint64_t mask_seed = rng.next_u64();
                     return [=](ParamStore& p) {
                       Rng mask_rng(mask_seed);
                       return proj(nd::dropout(p.var("x"), 0.3, true, mask_rng));
                     };
                   }});
  return cases;
}


// Model-level components run batch norm in inference mode: with batch
// statistics the shift of a pre-norm is cancelled by the next norm, which
// leaves parameters whose exact gradient is zero. The deeper blocks have
// gradients near 1e-5, so a wider step keeps cancellation error down.
std::vector<GradCase> model_grad_cases() {
  std::vector<GradCase> cases;
  // No biases: the loss ignores a common shift of the scores, so their exact
  // gradient is zero and the relative error would be meaningless.
  cases.push_back({"norm_in_norm_linear_model", 1e-4, {}, [](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const std::size_t n = 3 + rng.below(6), din = 2 + rng.below(3), hid = 2 + rng.below(3);
                     const Tensor x = random_tensor({n, din}, rng);
                     const Tensor mos = random_tensor({n}, rng, 1, 5);
                     ps.add("w1", ParamKind::Weight, random_tensor({hid, din}, rng));
                     ps.add("w2", ParamKind::Weight, random_tensor({1, hid}, rng));
                     return [=](ParamStore& p) {
                       ad::Var h = nd::linear(C(x), p.var("w1"), ad::Var());
                       ad::Var y = nd::reshape(nd::linear(h, p.var("w2"), ad::Var()), {n});
                       return norm_in_norm_loss(y, C(mos), LossConfig{});
                     };
                   }});
  cases.push_back({"stem", 1e-4, {.max_coords_per_entry = 8}, [](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const BackboneConfig cfg;
                     ParamStore full;
                     init_backbone(full, cfg, rng);
                     ps = subset(full, "backbone.stem");
                     jitter(ps, rng, 0.2);
                     const Tensor x = random_tensor({2, 3, 8, 8}, rng, 0, 1);
                     const auto proj = projector_for({2, cfg.stage_dims[0], 4, 4}, rng);
                     return [=](ParamStore& p) { return proj(stem_forward(C(x), p, cfg, false)); };
                   }});
  cases.push_back({"mbconv", 1e-4, {.eps = 1e-5, .max_coords_per_entry = 6}, [](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const BackboneConfig cfg;
                     init_mbconv(ps, "m", 4, 8, cfg, rng);
                     jitter(ps, rng, 0.3);
                     const Tensor x = random_tensor({2, 4, 4, 4}, rng);
                     const auto proj = projector_for({2, 8, 4, 4}, rng);
                     return [=](ParamStore& p) { return proj(mbconv_forward(C(x), p, "m", 4, 8, false)); };
                   }});
  cases.push_back({"window_attention", 1e-4, {.max_coords_per_entry = 6},
                   [](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const BackboneConfig cfg;
                     init_attention(ps, "a", 8, cfg, rng);
                     jitter(ps, rng, 0.3);
                     const std::size_t T = cfg.window * cfg.window;
                     const Tensor x = random_tensor({3, T, 8}, rng);
                     const auto proj = projector_for({3, T, 8}, rng);
                     return [=](ParamStore& p) { return proj(window_attention(C(x), p, "a", cfg)); };
                   }});
  cases.push_back({"maxvit_block", 1e-4, {.eps = 1e-5, .max_coords_per_entry = 4},
                   [](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const BackboneConfig cfg;
                     init_maxvit_block(ps, "blk", 4, 8, cfg, rng);
                     jitter(ps, rng, 0.3);
                     const Tensor x = random_tensor({2, 4, 4, 4}, rng);
                     const auto proj = projector_for({2, 8, 4, 4}, rng);
                     return [=](ParamStore& p) {
                       return proj(maxvit_block_forward(C(x), p, "blk", 4, 8, cfg, false));
                     };
                   }});
  cases.push_back({"head", 1e-3, {.max_coords_per_entry = 6}, [](ParamStore& ps, Rng& rng) -> ScalarFn {
                     const BackboneConfig b;
                     HeadConfig h;
                     h.fusion_dim = 16;
                     h.gru_hidden = 8;
                     h.fc_hidden = 8;
                     init_head(ps, h, b, rng);
                     jitter(ps, rng, 0.1);
                     const std::size_t B = 2, K = 3, N = B * K;
                     FeaturePyramid pyr;
                     std::size_t hw = 8;
                     for (std::size_t i = 0; i < 4; ++i, hw /= 2)
                       pyr.F[i] = C(random_tensor({N, b.stage_dims[i], std::max<std::size_t>(hw, 2),
                                                   std::max<std::size_t>(hw, 2)},
                                                  rng, 0.05, 1.0));
                     const auto proj = projector_for({B, K}, rng);
                     return [=](ParamStore& p) {
                       ad::Var f = head_features(pyr, p, h);
                       Rng unused(0);
                       return proj(regress_sequence(nd::reshape(f, {B, K, f.shape()[1]}), p, h, false, unused));
                     };
                   }});
  // Whole pipeline on 64-pixel viewports (F4 is 2x2, so every GeM exponent
  // is live), three sequences of two viewports, Norm-in-Norm loss. A seeded
  // subset of entries is checked per seed. The loss carries ~1e-14 of
  // round-off, so partials near 1e-8 (inputs from clamped GeM channels or
  // saturated gelu units) are below what a central difference can resolve;
  // coordinates come from partials >= 1e-5.
  cases.push_back({"end_to_end", 1e-3,
                   {.max_coords_per_entry = 2, .max_entries = 10, .min_abs_grad = 1e-5},
                   [](ParamStore& ps, Rng& rng) -> ScalarFn {
                     ModelConfig cfg;
                     cfg.viewport_size = 64;
                     cfg.head.dropout = 0.0;
                     const std::uint64_t seed = rng.next_u64();
                     ps = Model(cfg, seed).params();
                     jitter(ps, rng, 0.05);
                     const Tensor x = random_tensor({3, 2, 3, 64, 64}, rng, 0, 1);
                     const Tensor mos = random_tensor({3}, rng, 1, 5);
                     return [=](ParamStore& p) {
                       Rng unused(0);
                       ad::Var s = nd::mean_axis(model_step_scores(p, cfg, C(x), false, unused), 1);
                       return norm_in_norm_loss(s, C(mos), LossConfig{});
                     };
                   }});
  return cases;
}

std::vector<GradComponentResult> run_grad_suite(const GradSuiteOptions& opt) {
  std::vector<GradCase> cases;
  if (opt.primitives) cases = primitive_grad_cases();
  if (opt.models)
    for (GradCase& c : model_grad_cases()) cases.push_back(std::move(c));
  std::vector<GradComponentResult> out;
  for (const GradCase& c : cases) {
    GradComponentResult r;
    r.name = c.name;
    r.threshold = c.threshold;
    for (std::uint64_t s = 0; s < opt.seeds; ++s) {
      ParamStore ps;
      Rng rng(opt.base_seed + s);
      const ScalarFn f = c.build(ps, rng);
      GradCheckOptions go = c.options;
      go.seed = opt.base_seed + s;
      const GradCheckResult g = grad_check(ps, f, go);
      ++r.runs;
      r.coords += g.coords_checked;
      r.below_min += g.coords_below_min;
      if (g.max_rel_error >= r.max_rel_error) {
        r.max_rel_error = g.max_rel_error;
        char buf[160];
        std::snprintf(buf, sizeof buf, "[%zu] seed %llu analytic %.6g numeric %.6g", g.worst_index,
                      static_cast<unsigned long long>(opt.base_seed + s), g.analytic, g.numeric);
        r.worst = g.worst_entry + buf;
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace max360iq
