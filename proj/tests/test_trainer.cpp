#include <gtest/gtest.h>
#include <unistd.h>

#include <filesystem>
#include <regex>

#include "max360iq/config.hpp"
#include "max360iq/errors.hpp"
#include "max360iq/trainer.hpp"
#include "test_util.hpp"

using namespace max360iq;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("max360iq_tr_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// 4 scenes x 2 distortions x 3 levels, equator sequences of 2 viewports.
struct TinySet {
  std::vector<Sample> train, val;
};

const TinySet& tiny_set() {
  static const TinySet set = [] {
    TempDir dir("set");
    SynthSpec s;
    s.n_scenes = 4;
    s.width = 64;
    s.height = 32;
    s.seed = 3;
    const Manifest m = generate_synthetic(s, dir.path);
    const Split sp = split_train_test(m.entries, 0.75, 1);
    const ExtractOptions opt{2, kPi / 2, 32};
    return TinySet{build_samples(m, sp.train, opt, SequenceMode::Equator),
                   build_samples(m, sp.test, opt, SequenceMode::Equator)};
  }();
  return set;
}

RunConfig tiny_config(std::uint64_t seed) {
  RunConfig c;
  c.train.K = 2;
  c.train.batch_size = 6;
  c.train.epochs = 2;
  c.train.seed = seed;
  return c;
}

ParamStore one_entry(const std::string& name, ParamKind kind, std::vector<double> v) {
  ParamStore ps;
  ps.add(name, kind, Tensor::vector(std::move(v)));
  return ps;
}

}  // namespace

// ---- Adam

TEST(Adam, ZeroGradientZeroDecayLeavesParameters) {
  Model m(ModelConfig{}, 4);
  ParamStore before = m.params();
  m.params().zero_grad();
  AdamState st;
  for (int i = 0; i < 3; ++i) adam_step(m.params(), st, {.lr = 1e-2, .weight_decay = 0.0});
  auto it = before.begin();
  for (auto& e : m.params()) {
    for (std::size_t i = 0; i < e->value.numel(); ++i) ASSERT_EQ(e->value[i], (*it)->value[i]) << e->name;
    ++it;
  }
}

TEST(Adam, OneStepOnHalfSquareDescends) {
  ParamStore ps = one_entry("theta", ParamKind::Weight, {1.0});
  AdamState st;
  ps.zero_grad();
  ad::backward(nd::scale(nd::sum(nd::pow(ps.var("theta"), 2.0)), 0.5));
  EXPECT_EQ(ps.at("theta").grad[0], 1.0);
  adam_step(ps, st, {.lr = 1e-3});
  EXPECT_LT(ps.at("theta").value[0], 1.0);
  // First bias-corrected step moves by lr (up to eps).
  EXPECT_NEAR(ps.at("theta").value[0], 1.0 - 1e-3, 1e-10);
}

TEST(Adam, ConvergesOnTwoParameterQuadratic) {
  // f = (a - 3)^2 + 2 (b + 1)^2 + (a - 3)(b + 1), minimizer (3, -1).
  ParamStore ps = one_entry("ab", ParamKind::Weight, {0.0, 0.0});
  AdamState st;
  const Tensor shift = Tensor::vector({-3.0, 1.0});
  for (int it = 0; it < 200; ++it) {
    ps.zero_grad();
    ad::Var d = nd::add(ps.var("ab"), ad::constant(shift));
    ad::Var da = nd::slice(d, 0, 0, 1), db = nd::slice(d, 0, 1, 2);
    ad::Var f = nd::sum(nd::add(nd::add(nd::pow(da, 2.0), nd::scale(nd::pow(db, 2.0), 2.0)), nd::mul(da, db)));
    ad::backward(f);
    adam_step(ps, st, {.lr = 0.1});
  }
  EXPECT_NEAR(ps.at("ab").value[0], 3.0, 1e-3);
  EXPECT_NEAR(ps.at("ab").value[1], -1.0, 1e-3);
}

TEST(Adam, WeightDecayOnlyOnWeightMatrices) {
  Model m(ModelConfig{}, 5);
  // Name audit: only matrices and conv kernels decay.
  const std::regex matrix(R"((^|\.)(w|[wu]_[zrh])$)");
  std::size_t decaying = 0;
  for (auto& e : m.params()) {
    const bool looks_like_matrix = std::regex_search(e->name, matrix);
    EXPECT_EQ(e->decays(), looks_like_matrix) << e->name;
    if (e->name.find("rho") != std::string::npos || e->name.ends_with(".b") ||
        e->name.find("gamma") != std::string::npos || e->name.find("beta") != std::string::npos ||
        e->name.find("rel_bias") != std::string::npos || e->name.find("running") != std::string::npos)
      EXPECT_FALSE(e->decays()) << e->name;
    decaying += e->decays();
  }
  EXPECT_GT(decaying, 50u);

  // Behaviour: with zero gradients only decaying entries move, by exactly lr*wd*theta.
  ParamStore before = m.params();
  m.params().zero_grad();
  AdamState st;
  adam_step(m.params(), st, {.lr = 0.1, .weight_decay = 0.5});
  auto it = before.begin();
  for (auto& e : m.params()) {
    for (std::size_t i = 0; i < e->value.numel(); ++i) {
      const double old = (*it)->value[i];
      if (e->decays())
        ASSERT_DOUBLE_EQ(e->value[i], old - 0.05 * old) << e->name;
      else
        ASSERT_EQ(e->value[i], old) << e->name;
    }
    ++it;
  }
}

TEST(Adam, RejectsMomentShapeMismatch) {
  ParamStore ps = one_entry("w", ParamKind::Weight, {1.0, 2.0});
  AdamState st;
  st.m.emplace("w", Tensor({3}));
  st.v.emplace("w", Tensor({3}));
  EXPECT_THROW(adam_step(ps, st, {}), PreconditionError);
}

// ---- checkpoints

TEST(Checkpoint, RoundTripIsBitExact) {
  const TinySet& d = tiny_set();
  RunConfig c = tiny_config(11);
  c.train.epochs = 1;
  const TrainResult r = train(c, d.train, d.val);
  TempDir dir("ckpt");
  save_checkpoint(dir.path / "a.ckpt", r.last);
  const Checkpoint back = load_checkpoint(dir.path / "a.ckpt");
  EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(r.last));
  EXPECT_EQ(back.step, r.last.step);
  EXPECT_EQ(back.adam.step, r.last.adam.step);
  EXPECT_EQ(back.rng_state, r.last.rng_state);
  EXPECT_EQ(to_json(back.config), to_json(r.last.config));

  Model before(c.model(), r.last.params), after(back.config.model(), back.params);
  const std::vector<double> p1 = predict(before, d.val), p2 = predict(after, d.val);
  ASSERT_EQ(p1.size(), p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) EXPECT_EQ(p1[i], p2[i]);
}

TEST(Checkpoint, RejectsCorruptInput) {
  Checkpoint c;
  c.params = one_entry("w", ParamKind::Weight, {1.0, 2.0});
  const std::string bytes = serialize_checkpoint(c);
  EXPECT_NO_THROW(deserialize_checkpoint(bytes));
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  std::string bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad), DataError);
  EXPECT_THROW(load_checkpoint("/nonexistent/x.ckpt"), DataError);
}

// ---- prediction

TEST(Predict, IndependentOfBatchingAndThreads) {
  const TinySet& d = tiny_set();
  Model m(tiny_config(0).model(), 21);
  const std::vector<double> ref = predict(m, d.train, 16);
  EXPECT_EQ(ref.size(), d.train.size());
  for (std::size_t b : {1u, 3u, 7u}) EXPECT_EQ(predict(m, d.train, b), ref) << "batch " << b;
  EXPECT_EQ(predict(m, d.train, 4, 3), ref);
  for (double v : ref) EXPECT_TRUE(std::isfinite(v));
}

TEST(Predict, DuplicateSequenceGivesSameImageScore) {
  const TinySet& d = tiny_set();
  Model m(tiny_config(0).model(), 22);
  std::vector<Sample> s{d.val[0], d.val[0], d.val[1]};
  s[1].condition = ViewingCondition::Bad5s;
  const std::vector<double> p = predict(m, s);
  EXPECT_EQ(p[0], p[1]);
  const std::vector<ImageScore> img = aggregate_by_image(s, p);
  ASSERT_EQ(img.size(), 2u);
  EXPECT_EQ(img[0].image_id, d.val[0].image_id);
  EXPECT_EQ(img[0].sequences, 2u);
  EXPECT_EQ(img[0].score, p[0]);
  EXPECT_EQ(img[1].score, p[2]);
}

TEST(Predict, OneScorePerImage) {
  const TinySet& d = tiny_set();
  Model m(tiny_config(0).model(), 23);
  const auto img = aggregate_by_image(d.val, predict(m, d.val));
  std::set<std::string> ids;
  for (const Sample& s : d.val) ids.insert(s.image_id);
  EXPECT_EQ(img.size(), ids.size());
}

TEST(Predict, RejectsMismatchedViewportSize) {
  const TinySet& d = tiny_set();
  ModelConfig mc = tiny_config(0).model();
  mc.viewport_size = 64;
  Model m(mc, 1);
  EXPECT_THROW(predict(m, d.val), PreconditionError);
}

// ---- training loop

TEST(Train, SameSeedGivesIdenticalLogsAndCheckpoints) {
  const TinySet& d = tiny_set();
  const RunConfig c = tiny_config(7);
  const TrainResult a = train(c, d.train, d.val), b = train(c, d.train, d.val);
  ASSERT_EQ(a.log.size(), 2u);
  EXPECT_EQ(json(a.log).dump(), json(b.log).dump());
  EXPECT_EQ(serialize_checkpoint(a.last), serialize_checkpoint(b.last));
  EXPECT_EQ(serialize_checkpoint(a.best), serialize_checkpoint(b.best));
  const TrainResult other = train(tiny_config(8), d.train, d.val);
  EXPECT_NE(json(a.log).dump(), json(other.log).dump());
}

TEST(Train, LogRecordsAndBestCheckpoint) {
  const TinySet& d = tiny_set();
  const TrainResult r = train(tiny_config(9), d.train, d.val);
  const std::size_t per_epoch = d.train.size() / 6 + (d.train.size() % 6 >= 2);
  for (const json& rec : r.log) {
    for (const char* k : {"epoch", "step", "train_loss", "batches", "val_srcc", "val_plcc", "val_rmse"})
      EXPECT_TRUE(rec.contains(k)) << k;
    EXPECT_TRUE(std::isfinite(rec["train_loss"].get<double>()));
    EXPECT_EQ(rec["batches"].get<std::size_t>() + rec["skipped_batches"].get<std::size_t>(), per_epoch);
  }
  double best = -2;
  for (const json& rec : r.log) best = std::max(best, rec["val_srcc"].get<double>());
  EXPECT_EQ(r.best.val_srcc, best);
  EXPECT_EQ(r.last.epoch, 2u);
  EXPECT_EQ(r.last.step, r.log.back()["step"].get<std::uint64_t>());
}

TEST(Train, TwoEpochSmokeLossDecreasesOnMostSeeds) {
  const TinySet& d = tiny_set();
  int decreased = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const TrainResult r = train(tiny_config(seed), d.train, d.val);
    const double l1 = r.log[0]["train_loss"].get<double>(), l2 = r.log[1]["train_loss"].get<double>();
    ASSERT_TRUE(std::isfinite(l1) && std::isfinite(l2));
    decreased += l2 < l1;
  }
  EXPECT_GE(decreased, 3);
}

TEST(Train, WithoutGruTrains) {
  const TinySet& d = tiny_set();
  RunConfig c = tiny_config(3);
  c.train.use_gru = false;
  c.train.epochs = 1;
  const TrainResult r = train(c, d.train, d.val);
  EXPECT_TRUE(std::isfinite(r.log[0]["train_loss"].get<double>()));
  for (auto& e : r.last.params) EXPECT_EQ(e->name.find("gru"), std::string::npos) << e->name;
}

TEST(Train, MaxStepsCapsTraining) {
  const TinySet& d = tiny_set();
  RunConfig c = tiny_config(3);
  c.train.epochs = 5;
  c.train.max_steps = 3;
  const TrainResult r = train(c, d.train, {});
  EXPECT_EQ(r.last.step, 3u);
  EXPECT_EQ(r.last.adam.step, 3u);
  EXPECT_TRUE(r.log.back()["val_srcc"].is_null());
}

TEST(Train, ConstantLabelBatchesAreSkippedWithWarning) {
  std::vector<Sample> same(tiny_set().train.begin(), tiny_set().train.begin() + 3);
  for (Sample& x : same) x.label = 2.0;
  RunConfig c = tiny_config(1);
  c.train.batch_size = 3;
  c.train.epochs = 1;
  const TrainResult r = train(c, same, {});
  EXPECT_EQ(r.log[0]["batches"].get<std::size_t>(), 0u);
  EXPECT_EQ(r.log[0]["skipped_batches"].get<std::size_t>(), 1u);
  ASSERT_EQ(r.warnings.size(), 1u);
  EXPECT_NE(r.warnings[0].find("constant labels"), std::string::npos);
  EXPECT_EQ(r.last.step, 0u);
}

TEST(Train, TrailingSingleSequenceIsDropped) {
  std::vector<Sample> s = tiny_set().train;
  s.resize(7);
  RunConfig c = tiny_config(1);
  c.train.batch_size = 3;
  c.train.epochs = 1;
  const TrainResult r = train(c, s, {});
  EXPECT_EQ(r.log[0]["batches"].get<std::size_t>() + r.log[0]["skipped_batches"].get<std::size_t>(), 2u);
}

// ---- config

TEST(Config, JsonRoundTripAndStrictness) {
  RunConfig c;
  c.train.lr = 3e-4;
  c.train.use_gru = false;
  c.sequences = SequenceMode::Equator;
  const RunConfig back = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));

  json j = to_json(c);
  j["train"]["learning_rate"] = 1.0;
  EXPECT_THROW(run_config_from_json(j), PreconditionError);
  j = to_json(c);
  j["extra"] = json::object();
  EXPECT_THROW(run_config_from_json(j), PreconditionError);
  j = to_json(c);
  j["train"]["batch_size"] = "16";
  EXPECT_THROW(run_config_from_json(j), PreconditionError);
  j = to_json(c);
  j["train"]["batch_size"] = 1;
  EXPECT_THROW(run_config_from_json(j), PreconditionError);
  j = to_json(c);
  j["train"]["use_msfi"] = false;
  j["train"]["use_dsg"] = false;
  EXPECT_THROW(run_config_from_json(j), PreconditionError);
  EXPECT_NO_THROW(run_config_from_json(json::object()));
}

TEST(Config, Overrides) {
  const RunConfig c = apply_overrides(RunConfig{}, {"train.lr=0.001", "train.use_gru=false",
                                                    "train.loss.kind=mse", "data.sequences=equator",
                                                    "model.backbone.stage_dims=[8,16,32,64]"});
  EXPECT_EQ(c.train.lr, 1e-3);
  EXPECT_FALSE(c.train.use_gru);
  EXPECT_FALSE(c.model().head.use_gru);
  EXPECT_EQ(c.train.loss.kind, LossKind::Mse);
  EXPECT_EQ(c.sequences, SequenceMode::Equator);
  EXPECT_THROW(apply_overrides(RunConfig{}, {"train.lr"}), PreconditionError);
  EXPECT_THROW(apply_overrides(RunConfig{}, {"train.nope=1"}), PreconditionError);
  EXPECT_THROW(apply_overrides(RunConfig{}, {"train=1"}), PreconditionError);
  EXPECT_THROW(apply_overrides(RunConfig{}, {"train.lr=-1"}), PreconditionError);
}
