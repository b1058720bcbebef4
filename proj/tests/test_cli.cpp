#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CmdResult {
  int code = -1;
  std::string out;  // stdout and stderr
};

CmdResult run(const std::string& args, const std::string& env = {}) {
  const std::string cmd = env + (env.empty() ? "" : " ") + MAX360IQ_BIN + " " + args + " 2>&1";
  CmdResult r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = std::fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = ::pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::size_t count_ext(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) n += e.path().extension() == ext;
  return n;
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

class Cli : public ::testing::Test {
 protected:
  static fs::path root;
  static void SetUpTestSuite() {
    root = fs::temp_directory_path() / ("max360iq_cli_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
  }
  static void TearDownTestSuite() { fs::remove_all(root); }
  static std::string p(const std::string& rel) { return (root / rel).string(); }
};
fs::path Cli::root;

const std::string kTiny =
    " --set train.K=2 --set train.batch_size=4 --set train.epochs=1 --set data.sequences=equator";

}  // namespace

TEST_F(Cli, HelpListsSubcommandsAndDefaults) {
  const CmdResult r = run("--help");
  EXPECT_EQ(r.code, 0);
  for (const char* s : {"synth", "extract", "train", "predict", "eval", "gradcheck", "sweep-k", "--threads",
                        "--seed"})
    EXPECT_NE(r.out.find(s), std::string::npos) << s;
  const CmdResult e = run("extract --help");
  EXPECT_EQ(e.code, 0);
  EXPECT_NE(e.out.find("[7]"), std::string::npos);
  EXPECT_NE(e.out.find("[90]"), std::string::npos);
  EXPECT_NE(e.out.find("[scanpath]"), std::string::npos);
}

TEST_F(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("extract --out x").code, 1);  // missing --manifest
  const CmdResult r = run("train --manifest nope.csv --out x --set train.nope=1");
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("train.nope"), std::string::npos);
  EXPECT_EQ(run("gradcheck --seeds 1", "MAX360IQ_THREADS=zero").code, 1);
}

TEST_F(Cli, SynthIsDeterministic) {
  const std::string args = " synth --scenes 2 --width 64 --height 32 --out ";
  ASSERT_EQ(run("--seed 5" + args + p("s1")).code, 0);
  ASSERT_EQ(run("--seed 5" + args + p("s2")).code, 0);
  ASSERT_EQ(run("--seed 6" + args + p("s3")).code, 0);
  EXPECT_EQ(slurp(p("s1/manifest.csv")), slurp(p("s2/manifest.csv")));
  std::size_t images = 0;
  for (const auto& e : fs::directory_iterator(p("s1/images"))) {
    EXPECT_EQ(slurp(e.path()), slurp(fs::path(p("s2/images")) / e.path().filename()));
    EXPECT_NE(slurp(e.path()), slurp(fs::path(p("s3/images")) / e.path().filename()));
    ++images;
  }
  EXPECT_EQ(images, 12u);  // 2 scenes x 2 distortions x 3 levels
}

TEST_F(Cli, ExtractCountsPerImage) {
  ASSERT_EQ(run("synth --scenes 1 --width 64 --height 32 --mode nonuniform --out " + p("nu")).code, 0);
  ASSERT_EQ(run("extract --manifest " + p("nu/manifest.csv") + " --out " + p("vp_eq") + " --mode equator").code, 0);
  ASSERT_EQ(run("extract --manifest " + p("nu/manifest.csv") + " --out " + p("vp_sp")).code, 0);
  const std::size_t n_images = 6;
  EXPECT_EQ(count_ext(p("vp_eq"), ".png"), 7 * n_images);
  EXPECT_EQ(count_ext(p("vp_sp"), ".png"), 28 * n_images);
  EXPECT_EQ(count_ext(p("vp_sp"), ".json"), n_images);
  for (const auto& e : fs::directory_iterator(p("vp_sp"))) {
    if (e.path().extension() != ".json") continue;
    const json j = json::parse(slurp(e.path()));
    EXPECT_EQ(j["K"], 7);
    ASSERT_EQ(j["sequences"].size(), 4u);
    for (const json& s : j["sequences"]) {
      EXPECT_TRUE(s["condition"].is_string());
      EXPECT_EQ(s["viewports"].size(), 7u);
    }
  }
}

TEST_F(Cli, MissingImageNamesThePath) {
  ASSERT_EQ(run("synth --scenes 1 --width 64 --height 32 --out " + p("mi")).code, 0);
  const fs::path victim = *fs::directory_iterator(p("mi/images"));
  fs::remove(victim);
  const CmdResult r = run("extract --manifest " + p("mi/manifest.csv") + " --out " + p("mi_vp"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find(victim.filename().string()), std::string::npos) << r.out;
  EXPECT_EQ(count_lines(r.out), 1u) << r.out;
}

TEST_F(Cli, TrainPredictEvalPipeline) {
  ASSERT_EQ(run("synth --scenes 3 --width 64 --height 32 --out " + p("pipe")).code, 0);
  const CmdResult t = run("--seed 2 train --manifest " + p("pipe/manifest.csv") + " --out " + p("run") + kTiny +
                    " --set data.split_ratio=0.67");
  ASSERT_EQ(t.code, 0) << t.out;
  for (const char* f : {"last.ckpt", "best.ckpt", "train_log.jsonl", "config.json"})
    EXPECT_TRUE(fs::exists(fs::path(p("run")) / f)) << f;
  const std::string log = slurp(p("run/train_log.jsonl"));
  EXPECT_EQ(count_lines(log), 1u);
  EXPECT_TRUE(json::parse(log.substr(0, log.find('\n'))).contains("val_srcc"));

  const CmdResult pr = run("predict --checkpoint " + p("run/last.ckpt") + " --manifest " + p("pipe/manifest.csv") +
                     " --out " + p("pred.csv"));
  ASSERT_EQ(pr.code, 0) << pr.out;
  const std::string csv = slurp(p("pred.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "image_id,condition,pred,mos");
  EXPECT_EQ(count_lines(csv), 1u + 18u);

  // Thread count does not change predictions.
  ASSERT_EQ(run("predict --checkpoint " + p("run/last.ckpt") + " --manifest " + p("pipe/manifest.csv") +
                    " --batch 5 --out " + p("pred3.csv"),
                "MAX360IQ_THREADS=3")
                .code,
            0);
  EXPECT_EQ(slurp(p("pred3.csv")), csv);

  const CmdResult ev = run("eval --predictions " + p("pred.csv") + " --out " + p("report.json") + " --scatter " +
                     p("scatter.csv"));
  ASSERT_EQ(ev.code, 0) << ev.out;
  const json rep = json::parse(slurp(p("report.json")));
  for (const char* k : {"plcc", "srcc", "rmse", "n"}) EXPECT_TRUE(rep.contains(k)) << k;
  EXPECT_EQ(rep["n"], 18);
  const std::string sc = slurp(p("scatter.csv"));
  EXPECT_EQ(sc.substr(0, sc.find('\n')), "pred,mapped_pred,mos,condition");
  EXPECT_EQ(count_lines(sc), 19u);

  // Same seed, same log.
  ASSERT_EQ(run("--seed 2 train --manifest " + p("pipe/manifest.csv") + " --out " + p("run2") + kTiny +
                " --set data.split_ratio=0.67")
                .code,
            0);
  EXPECT_EQ(slurp(p("run2/train_log.jsonl")), log);
  EXPECT_EQ(slurp(p("run2/last.ckpt")), slurp(p("run/last.ckpt")));
}

TEST_F(Cli, EvalRejectsMalformedPredictions) {
  std::ofstream(p("bad.csv")) << "image_id,condition,pred,mos\na,,1.0,x\n";
  const CmdResult r = run("eval --predictions " + p("bad.csv") + " --out " + p("bad.json"));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find(":2:"), std::string::npos) << r.out;
  std::ofstream(p("flat.csv")) << "image_id,condition,pred,mos\na,,1,1\nb,,1,2\nc,,1,3\nd,,1,4\ne,,1,5\n";
  EXPECT_EQ(run("eval --predictions " + p("flat.csv") + " --out " + p("flat.json")).code, 3);
}

TEST_F(Cli, GradcheckListsComponentsAndCatchesCorruption) {
  const CmdResult ok = run("gradcheck --primitives-only --seeds 2");
  EXPECT_EQ(ok.code, 0) << ok.out;
  for (const char* name : {"gelu", "conv2d", "gru_cell", "gem_pool", "layer_norm", "softmax", "max_pool2d"})
    EXPECT_NE(ok.out.find(name), std::string::npos) << name;
  const CmdResult bad = run("gradcheck --primitives-only --seeds 2 --corrupt-gelu-backward");
  EXPECT_EQ(bad.code, 3);
  EXPECT_NE(bad.out.find("FAIL"), std::string::npos);
}

TEST_F(Cli, SweepKWritesOneRowPerK) {
  ASSERT_EQ(run("synth --scenes 3 --width 64 --height 32 --out " + p("sw")).code, 0);
  const std::string args = "--seed 4 sweep-k --manifest " + p("sw/manifest.csv") + kTiny +
                           " --set data.split_ratio=0.67 --k-list 1,2,3 --out ";
  const CmdResult r = run(args + p("sweep.csv"));
  ASSERT_EQ(r.code, 0) << r.out;
  const std::string csv = slurp(p("sweep.csv"));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "K,plcc,srcc,rmse");
  EXPECT_EQ(count_lines(csv), 4u);
  ASSERT_EQ(run(args + p("sweep2.csv")).code, 0);
  EXPECT_EQ(slurp(p("sweep2.csv")), csv);
}
