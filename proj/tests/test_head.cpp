#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "max360iq/errors.hpp"
#include "max360iq/grad_check.hpp"
#include "max360iq/head.hpp"
#include "max360iq/model.hpp"
#include "test_util.hpp"

using namespace max360iq;
using max360iq::testing::projector_for;
using max360iq::testing::random_tensor;

namespace {

double gem_value(const Tensor& values, double rho) {
  const Var x = ad::constant(values.reshaped({1, 1, 1, values.numel()}));
  return nd::gem_pool(x, ad::constant(Tensor::scalar(rho))).item();
}

FeaturePyramid random_pyramid(std::size_t N, const BackboneConfig& b, Rng& rng) {
  FeaturePyramid p;
  std::size_t hw = 16;  // F4 keeps 2x2, so every exponent matters
  for (std::size_t i = 0; i < 4; ++i, hw /= 2)
    p.F[i] = ad::constant(random_tensor({N, b.stage_dims[i], hw, hw}, rng, 0.05, 2.0));
  return p;
}

void zero_all(ParamStore& ps, const std::string& prefix) {
  for (auto& e : ps)
    if (e->name.rfind(prefix, 0) == 0) e->value.fill(0.0);
}

}  // namespace

TEST(Gem, StatedValues) {
  EXPECT_NEAR(gem_value(Tensor({6}, 0.37), 1.0), 0.37, 1e-15);
  EXPECT_NEAR(gem_value(Tensor({6}, 0.37), 7.5), 0.37, 1e-14);
  const Tensor v = Tensor::vector({1, 2, 3, 4});
  EXPECT_NEAR(gem_value(v, 1.0), 2.5, 1e-12);
  EXPECT_NEAR(gem_value(v, 3.0), std::cbrt(25.0), 1e-12);
  EXPECT_NEAR(gem_value(v, 3.0), 2.9240, 1e-4);
}

TEST(Gem, BoundedByMeanAndMaxAndMonotoneInRho) {
  Rng rng(1);
  const double rhos[] = {1.0, 1.5, 2.0, 3.0, 5.0, 8.0, 16.0, 32.0};
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor t = random_tensor({1 + rng.below(60)}, rng, 0.0, 3.0);
    double mean = 0, mx = 0;
    for (double v : t.data()) mean += std::max(v, 1e-6), mx = std::max(mx, v);
    mean /= static_cast<double>(t.numel());
    double prev = 0;
    for (double r : rhos) {
      const double g = gem_value(t, r);
      EXPECT_GE(g, mean * (1 - 1e-12));
      EXPECT_LE(g, mx * (1 + 1e-12));
      EXPECT_GE(g, prev * (1 - 1e-12));
      prev = g;
    }
    EXPECT_NEAR(gem_value(t, 1.0), mean, 1e-12);
  }
}

TEST(Gem, LargeRhoApproachesMax) {
  // Tight bound: max * n^(-1/rho) <= GeM <= max, attained by one dominant value.
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(256);
    Tensor t({n});
    for (double& v : t.data()) v = rng.uniform(0.1, 1.0);
    const double mx = *std::max_element(t.data().begin(), t.data().end());
    const double g = gem_value(t, 64.0);
    EXPECT_LE(g, mx * (1 + 1e-12));
    EXPECT_GE(g, mx * std::pow(static_cast<double>(n), -1.0 / 64.0) * (1 - 1e-12));
    if (n <= 26) EXPECT_LE((mx - g) / mx, 0.05);
  }
  // Beyond 26 elements the 5% window is not guaranteed.
  Tensor spike({256});
  for (std::size_t i = 0; i < 256; ++i) spike[i] = 0.1 + 0.1 * static_cast<double>(i) / 256.0;
  spike[255] = 1.0;
  EXPECT_GT((1.0 - gem_value(spike, 64.0)) / 1.0, 0.05);
}

TEST(Gem, ReparameterizedExponentStartsAtThreeAndStaysAboveOne) {
  ParamStore ps;
  ps.add("r", ParamKind::Exponent, Tensor::scalar(gem_rho_raw_init()));
  EXPECT_NEAR(gem_rho(ps, "r").item(), 3.0, 1e-12);
  for (double raw : {-50.0, -5.0, 0.0, 5.0}) {
    ps.at("r").value[0] = raw;
    EXPECT_GE(gem_rho(ps, "r").item(), 1.0);
  }
}

TEST(Msfi, FusedLengthAndZeroWeights) {
  BackboneConfig b;
  HeadConfig h;
  ParamStore ps;
  Rng rng(3);
  init_head(ps, h, b, rng);
  EXPECT_EQ(ps.at("head.fusion.w").value.shape(), (Shape{64, 120}));
  const FeaturePyramid pyr = random_pyramid(2, b, rng);
  EXPECT_EQ(msfi_fuse(pyr, ps).shape(), (Shape{2, 64}));
  ps.at("head.fusion.w").value.fill(0.0);
  for (std::size_t i = 0; i < 64; ++i) ps.at("head.fusion.b").value[i] = 0.01 * i;
  const Tensor v = msfi_fuse(pyr, ps).value();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(v[n * 64 + i], 0.01 * i);
}

TEST(Msfi, GradientThroughExponents) {
  BackboneConfig b;
  HeadConfig h;
  ParamStore full;
  Rng rng(4);
  init_head(full, h, b, rng);
  ParamStore ps;
  for (const auto& e : full)
    if (e->name.find("gem") != std::string::npos || e->name.find("fusion") != std::string::npos)
      ps.add(e->name, e->kind, e->value);
  for (const char* n : {"head.gem1.rho_raw", "head.gem2.rho_raw", "head.gem3.rho_raw",
                        "head.gem4.rho_raw", "head.gem_g.rho_raw"})
    ps.at(n).value[0] += rng.uniform(-1.0, 1.0);
  const FeaturePyramid pyr = random_pyramid(2, b, rng);
  const auto proj = projector_for({2, 128}, rng);
  auto f = [&](ParamStore& p) { return proj(dsg_concat(pyr, msfi_fuse(pyr, p), p)); };
  const GradCheckResult r = grad_check(ps, f, {.eps = 1e-6, .max_coords_per_entry = 40});
  EXPECT_LE(r.max_rel_error, 1e-4) << r.worst_entry;
}

TEST(Dsg, ConcatLayout) {
  BackboneConfig b;
  HeadConfig h;
  h.fusion_dim = 32;
  ParamStore ps;
  Rng rng(5);
  init_head(ps, h, b, rng);
  FeaturePyramid pyr = random_pyramid(1, b, rng);
  EXPECT_EQ(dsg_concat(pyr, msfi_fuse(pyr, ps), ps).shape(), (Shape{1, 96}));
  pyr.F[3] = ad::constant(Tensor({1, 64, 2, 2}, 0.75));
  const Tensor v = dsg_concat(pyr, ad::constant(Tensor({1, 32}, 0.0)), ps).value();
  for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(v[i], 0.0);
  for (std::size_t i = 32; i < 96; ++i) EXPECT_NEAR(v[i], 0.75, 1e-14);
}

TEST(HeadFeatures, TogglesSelectComponents) {
  BackboneConfig b;
  Rng rng(6);
  const FeaturePyramid pyr = random_pyramid(2, b, rng);
  for (auto [msfi, dsg, dim] : {std::tuple{true, true, 128u}, {true, false, 64u}, {false, true, 64u}}) {
    HeadConfig h;
    h.use_msfi = msfi;
    h.use_dsg = dsg;
    ParamStore ps;
    init_head(ps, h, b, rng);
    EXPECT_EQ(h.feature_dim(b), dim);
    EXPECT_EQ(head_features(pyr, ps, h).shape(), (Shape{2, dim}));
  }
  HeadConfig bad;
  bad.use_msfi = bad.use_dsg = false;
  EXPECT_THROW(bad.validate(), PreconditionError);
}

TEST(Regress, ZeroWeightsEmitFinalBias) {
  BackboneConfig b;
  for (bool gru : {true, false}) {
    HeadConfig h;
    h.use_gru = gru;
    ParamStore ps;
    Rng rng(7);
    init_head(ps, h, b, rng);
    zero_all(ps, "head.gru");
    zero_all(ps, "head.fc");
    ps.at("head.fc2.b").value[0] = 3.25;
    const Var s = regress_sequence(ad::constant(random_tensor({2, 7, 128}, rng)), ps, h, false, rng);
    EXPECT_EQ(s.shape(), (Shape{2, 7}));
    for (double v : s.value().data()) EXPECT_EQ(v, 3.25);
  }
}

TEST(Regress, StepwiseWithoutGruAndOrderSensitiveWithGru) {
  BackboneConfig b;
  Rng rng(8);
  const std::size_t K = 5, D = 128;
  const Tensor x = random_tensor({1, K, D}, rng);
  const std::vector<std::size_t> perm{2, 4, 0, 3, 1};
  Tensor xp(x.shape());
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t d = 0; d < D; ++d) xp[k * D + d] = x[perm[k] * D + d];
  for (bool gru : {false, true}) {
    HeadConfig h;
    h.use_gru = gru;
    ParamStore ps;
    init_head(ps, h, b, rng);
    const Tensor s = regress_sequence(ad::constant(x), ps, h, false, rng).value();
    const Tensor sp = regress_sequence(ad::constant(xp), ps, h, false, rng).value();
    double diff = 0;
    for (std::size_t k = 0; k < K; ++k) diff = std::max(diff, std::abs(sp[k] - s[perm[k]]));
    if (gru)
      EXPECT_GT(diff, 1e-6);
    else
      EXPECT_EQ(diff, 0.0);
  }
  HeadConfig h;
  ParamStore ps;
  init_head(ps, h, b, rng);
  EXPECT_THROW(regress_sequence(ad::constant(Tensor({1, 128})), ps, h, false, rng),
               PreconditionError);
}

TEST(Regress, DropoutOnlyInTrainMode) {
  BackboneConfig b;
  HeadConfig h;
  h.dropout = 0.5;
  ParamStore ps;
  Rng rng(9);
  init_head(ps, h, b, rng);
  const Var x = ad::constant(random_tensor({2, 3, 128}, rng));
  Rng r1(1), r2(2);
  EXPECT_EQ(regress_sequence(x, ps, h, false, r1).value(), regress_sequence(x, ps, h, false, r2).value());
  EXPECT_NE(regress_sequence(x, ps, h, true, r1).value(), regress_sequence(x, ps, h, true, r2).value());
}

TEST(Aggregate, Means) {
  const double a[] = {1, 2, 3};
  EXPECT_EQ(aggregate_sequence(a), 2.0);
  const double one[] = {0.7};
  EXPECT_EQ(aggregate_image(one), 0.7);
  const std::vector<double> same(7, 4.5);
  EXPECT_EQ(aggregate_sequence(same), 4.5);
  EXPECT_THROW(aggregate_sequence(std::span<const double>()), PreconditionError);
  EXPECT_THROW(aggregate_image(std::span<const double>()), PreconditionError);

  // Equal K across sequences: mean of means is the grand mean.
  Rng rng(10);
  std::vector<double> seq_means, all;
  for (int m = 0; m < 4; ++m) {
    std::vector<double> s(7);
    for (double& v : s) all.push_back(v = rng.uniform(1, 5));
    seq_means.push_back(aggregate_sequence(s));
  }
  EXPECT_NEAR(aggregate_image(seq_means), aggregate_sequence(all), 1e-12);
}

TEST(Head, DeterministicAndGradientCheckEndToEnd) {
  BackboneConfig b;
  HeadConfig h;
  h.dropout = 0.0;
  h.fusion_dim = 16;
  h.gru_hidden = 8;
  h.fc_hidden = 8;
  ParamStore ps;
  Rng rng(11);
  init_head(ps, h, b, rng);
  const std::size_t B = 2, K = 3;
  const FeaturePyramid pyr = random_pyramid(B * K, b, rng);
  const auto proj = projector_for({B, K}, rng);
  auto f = [&](ParamStore& p) {
    Var feats = head_features(pyr, p, h);
    Rng unused(0);
    return proj(regress_sequence(nd::reshape(feats, {B, K, feats.shape()[1]}), p, h, true, unused));
  };
  EXPECT_EQ(f(ps).item(), f(ps).item());
  const GradCheckResult r = grad_check(ps, f, {.eps = 1e-6, .max_coords_per_entry = 20});
  EXPECT_LE(r.max_rel_error, 1e-3) << r.worst_entry;
}

TEST(Model, ShapesAndToggles) {
  ModelConfig cfg;
  for (bool gru : {true, false}) {
    cfg.head.use_gru = gru;
    Model m(cfg, 1);
    Rng rng(12);
    const Var s = m.step_scores(ad::constant(random_tensor({2, 3, 3, 32, 32}, rng, 0, 1)), false, rng);
    EXPECT_EQ(s.shape(), (Shape{2, 3}));
    EXPECT_THROW(m.step_scores(ad::constant(Tensor({2, 3, 3, 16, 16})), false, rng),
                 PreconditionError);
  }
}

TEST(Model, SameSeedSameParameters) {
  ModelConfig cfg;
  Model a(cfg, 5), b(cfg, 5), c(cfg, 6);
  EXPECT_EQ(a.params().at("head.fc1.w").value, b.params().at("head.fc1.w").value);
  EXPECT_NE(a.params().at("head.fc1.w").value, c.params().at("head.fc1.w").value);
}

TEST(Model, RejectsMismatchedParameters) {
  ModelConfig cfg;
  Model a(cfg, 1);
  ModelConfig other = cfg;
  other.head.gru_hidden = 16;
  EXPECT_THROW(Model(other, a.params()), PreconditionError);
  EXPECT_NO_THROW(Model(cfg, a.params()));
}
