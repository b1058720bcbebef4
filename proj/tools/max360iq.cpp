// Command-line front end: synth, extract, train, predict, eval, gradcheck, sweep-k.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "max360iq/config.hpp"
#include "max360iq/data.hpp"
#include "max360iq/errors.hpp"
#include "max360iq/evaluation.hpp"
#include "max360iq/grad_suite.hpp"
#include "max360iq/image_io.hpp"
#include "max360iq/ops.hpp"
#include "max360iq/trainer.hpp"

namespace fs = std::filesystem;
using namespace max360iq;
using nlohmann::json;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

RunConfig run_config(const std::string& path, const std::vector<std::string>& sets, const Globals& g,
                     bool seed_given) {
  RunConfig c = path.empty() ? RunConfig{} : load_run_config(path);
  c = apply_overrides(c, sets);
  if (seed_given) c.train.seed = g.seed;
  c.validate();
  return c;
}

std::vector<ManifestEntry> pick_split(const Manifest& m, const RunConfig& c, const std::string& which) {
  if (which == "all") return m.entries;
  const Split s = split_train_test(m.entries, c.split_ratio, c.split_seed);
  return which == "train" ? s.train : s.test;
}

std::vector<std::size_t> parse_k_list(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      const long v = std::stol(tok, &used);
      if (used != tok.size() || v < 1) throw std::invalid_argument("");
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw PreconditionError("bad K list entry '" + tok + "'");
    }
  }
  if (out.empty()) throw PreconditionError("K list is empty");
  return out;
}

std::string condition_field(const std::optional<ViewingCondition>& c) {
  return c ? std::string(condition_name(*c)) : std::string();
}

// ---- synth

struct SynthArgs {
  std::string out, mode = "uniform", distortions = "blur,noise", levels = "1,2,3";
  std::size_t scenes = 40, width = 128, height = 64, short_points = 50, long_points = 150;
  double recency = 0.0;
  bool use_recency = false;
};

int run_synth(const SynthArgs& a, const Globals& g) {
  SynthSpec s;
  s.n_scenes = a.scenes;
  s.width = a.width;
  s.height = a.height;
  s.mode = parse_synth_mode(a.mode);
  s.distortions.clear();
  for (const std::string& d : CLI::detail::split(a.distortions, ',')) {
    if (d == "blur") s.distortions.push_back(DistortionKind::GaussianBlur);
    else if (d == "noise") s.distortions.push_back(DistortionKind::GaussianNoise);
    else throw PreconditionError("unknown distortion '" + d + "' (blur, noise)");
  }
  s.levels.clear();
  for (std::size_t l : parse_k_list(a.levels)) s.levels.push_back(static_cast<int>(l));
  if (a.use_recency) s.recency_lambda = a.recency;
  s.short_points = a.short_points;
  s.long_points = a.long_points;
  s.seed = g.seed;
  const Manifest m = generate_synthetic(s, a.out);
  std::cout << "wrote " << m.entries.size() << " images to " << a.out << "\n";
  return 0;
}

// ---- extract

struct ExtractArgs {
  std::string manifest, out, mode = "scanpath";
  std::size_t k = 7, size = 32;
  double fov = 90.0;
};

int run_extract(const ExtractArgs& a) {
  if (a.mode != "scanpath" && a.mode != "equator")
    throw PreconditionError("--mode must be scanpath or equator");
  if (!(a.fov > 0 && a.fov < 180)) throw PreconditionError("--fov must lie in (0, 180)");
  const Manifest m = load_manifest(a.manifest);
  const ExtractOptions opt{a.k, a.fov * kPi / 180.0, a.size};
  fs::create_directories(a.out);
  std::size_t files = 0;
  for (const ManifestEntry& e : m.entries) {
    const ErpImage img = read_image(m.resolve(e.erp_path));
    std::vector<ViewportSequence> seqs;
    if (a.mode == "scanpath" && !e.scanpaths.empty())
      seqs = extract_sequences(img, e.scanpaths, opt, e.image_id);
    else
      seqs.push_back(extract_equator_sequence(img, opt, e.image_id));
    json side{{"image_id", e.image_id}, {"K", a.k}, {"fov_deg", a.fov}, {"size", a.size},
              {"mode", a.mode}, {"sequences", json::array()}};
    for (const ViewportSequence& s : seqs) {
      const std::string tag = s.condition ? std::string(condition_name(*s.condition)) : "equator";
      json js{{"condition", s.condition ? json(tag) : json(nullptr)}, {"viewports", json::array()}};
      for (std::size_t k = 0; k < s.size(); ++k) {
        std::ostringstream name;
        name << e.image_id << "_" << tag << "_" << k << ".png";
        write_png(fs::path(a.out) / name.str(), s.viewports[k]);
        js["viewports"].push_back(json{{"file", name.str()},
                                   {"lon", s.specs[k].center.lon()},
                                   {"lat", s.specs[k].center.lat()}});
        ++files;
      }
      side["sequences"].push_back(js);
    }
    write_file_atomic(fs::path(a.out) / (e.image_id + ".json"), side.dump(1) + "\n");
  }
  std::cout << "wrote " << files << " viewports for " << m.entries.size() << " images to " << a.out << "\n";
  return 0;
}

// ---- train

struct TrainArgs {
  std::string manifest, config, out;
  std::vector<std::string> sets;
};

int run_train(const TrainArgs& a, const Globals& g, bool seed_given) {
  const RunConfig cfg = run_config(a.config, a.sets, g, seed_given);
  const Manifest m = load_manifest(a.manifest);
  const Split split = split_train_test(m.entries, cfg.split_ratio, cfg.split_seed);
  const auto tr = build_samples(m, split.train, cfg.extract(), cfg.sequences);
  const auto va = build_samples(m, split.test, cfg.extract(), cfg.sequences);
  fs::create_directories(a.out);
  const fs::path out(a.out);
  write_file_atomic(out / "config.json", to_json(cfg).dump(2) + "\n");
  std::string log;
  const TrainResult r = train(cfg, tr, va, [&](const json& rec) {
    log += rec.dump() + "\n";
    write_file_atomic(out / "train_log.jsonl", log);
    std::cerr << rec.dump() << "\n";
  });
  for (const std::string& w : r.warnings) std::cerr << "warning: " << w << "\n";
  save_checkpoint(out / "last.ckpt", r.last);
  save_checkpoint(out / "best.ckpt", r.best);
  std::cout << "trained " << r.last.step << " steps; best val SRCC " << fmt(r.best.val_srcc)
            << " at epoch " << r.best.epoch << "\n";
  return 0;
}

// ---- predict

struct PredictArgs {
  std::string checkpoint, manifest, out, split = "all";
  std::size_t batch = 16;
};

std::string predictions_csv(const std::vector<Sample>& samples, const std::vector<double>& pred) {
  std::ostringstream os;
  os << "image_id,condition,pred,mos\n";
  for (std::size_t i = 0; i < samples.size(); ++i)
    os << samples[i].image_id << "," << condition_field(samples[i].condition) << "," << fmt(pred[i])
       << "," << fmt(samples[i].label) << "\n";
  return os.str();
}

int run_predict(const PredictArgs& a, const Globals& g) {
  if (a.split != "all" && a.split != "train" && a.split != "test")
    throw PreconditionError("--split must be all, train or test");
  Checkpoint c = load_checkpoint(a.checkpoint);
  const Manifest m = load_manifest(a.manifest);
  const auto samples = build_samples(m, pick_split(m, c.config, a.split), c.config.extract(), c.config.sequences);
  Model model(c.config.model(), std::move(c.params));
  const std::vector<double> pred = predict(model, samples, a.batch, g.threads);
  write_file_atomic(a.out, predictions_csv(samples, pred));
  std::cout << "wrote " << samples.size() << " predictions to " << a.out << "\n";
  return 0;
}

// ---- eval

struct EvalArgs {
  std::string predictions, out, scatter;
};

int run_eval(const EvalArgs& a) {
  std::istringstream in(read_file(a.predictions));
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line.rfind("image_id,condition,pred,mos", 0) != 0)
    throw DataError(a.predictions + ":1: expected header image_id,condition,pred,mos");
  std::vector<double> pred, mos;
  std::vector<std::optional<ViewingCondition>> cond;
  std::vector<std::string> cond_text;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::vector<std::string> f = CLI::detail::split(line, ',');
    const std::string where = a.predictions + ":" + std::to_string(lineno) + ": ";
    if (f.size() != 4) throw DataError(where + "expected 4 fields");
    std::optional<ViewingCondition> c;
    if (!f[1].empty()) {
      c = parse_condition(f[1]);
      if (!c) throw DataError(where + "unknown condition '" + f[1] + "'");
    }
    try {
      std::size_t u1 = 0, u2 = 0;
      const double p = std::stod(f[2], &u1), y = std::stod(f[3], &u2);
      if (u1 != f[2].size() || u2 != f[3].size() || !std::isfinite(p) || !std::isfinite(y))
        throw std::invalid_argument("");
      pred.push_back(p);
      mos.push_back(y);
    } catch (const std::exception&) {
      throw DataError(where + "pred and mos must be finite numbers");
    }
    cond.push_back(c);
    cond_text.push_back(f[1]);
  }
  const EvalReport r = evaluate(pred, mos, cond);
  write_file_atomic(a.out, report_to_json(r).dump(2) + "\n");
  if (!a.scatter.empty()) {
    std::ostringstream os;
    os << "pred,mapped_pred,mos,condition\n";
    for (std::size_t i = 0; i < pred.size(); ++i)
      os << fmt(pred[i]) << "," << fmt(r.mapped[i]) << "," << fmt(mos[i]) << "," << cond_text[i] << "\n";
    write_file_atomic(a.scatter, os.str());
  }
  std::cout << "PLCC " << fmt(r.plcc) << " SRCC " << fmt(r.srcc) << " RMSE " << fmt(r.rmse) << " n " << r.n
            << "\n";
  return 0;
}

// ---- gradcheck

struct GradArgs {
  std::size_t seeds = 20;
  bool corrupt = false, primitives_only = false, models_only = false;
};

int run_gradcheck(const GradArgs& a, const Globals& g) {
  if (a.primitives_only && a.models_only) throw PreconditionError("--primitives-only and --models-only conflict");
  if (a.corrupt) nd::test_hooks::set_gelu_backward_scale(1.5);
  GradSuiteOptions opt;
  opt.seeds = a.seeds;
  opt.base_seed = g.seed ? g.seed : opt.base_seed;
  opt.primitives = !a.models_only;
  opt.models = !a.primitives_only;
  bool ok = true;
  for (const GradComponentResult& r : run_grad_suite(opt)) {
    std::cout << std::left << std::setw(28) << r.name << " max_rel " << std::scientific << std::setprecision(3)
              << r.max_rel_error << " threshold " << r.threshold << std::defaultfloat << " runs " << r.runs
              << " coords " << r.coords
              << (r.passed() ? "  PASS" : "  FAIL  worst " + r.worst) << "\n";
    ok = ok && r.passed();
  }
  std::cout << (ok ? "all components pass" : "gradient check FAILED") << "\n";
  return ok ? 0 : 3;
}

// ---- sweep-k

struct SweepArgs {
  std::string manifest, config, out, k_list = "3,5,7";
  std::vector<std::string> sets;
};

int run_sweep(const SweepArgs& a, const Globals& g, bool seed_given) {
  const RunConfig base = run_config(a.config, a.sets, g, seed_given);
  const std::vector<std::size_t> ks = parse_k_list(a.k_list);
  const Manifest m = load_manifest(a.manifest);
  const Split split = split_train_test(m.entries, base.split_ratio, base.split_seed);
  std::ostringstream os;
  os << "K,plcc,srcc,rmse\n";
  for (std::size_t k : ks) {
    RunConfig c = base;
    c.train.K = k;
    const auto tr = build_samples(m, split.train, c.extract(), c.sequences);
    const auto te = build_samples(m, split.test, c.extract(), c.sequences);
    // Scored with the last checkpoint; the test split is not used for selection.
    TrainResult r = train(c, tr, {});
    Model model(c.model(), std::move(r.last.params));
    const std::vector<double> pred = predict(model, te, 16, g.threads);
    std::vector<double> mos;
    for (const Sample& s : te) mos.push_back(s.label);
    const EvalReport rep = evaluate(pred, mos);
    os << k << "," << fmt(rep.plcc) << "," << fmt(rep.srcc) << "," << fmt(rep.rmse) << "\n";
    std::cerr << "K=" << k << " PLCC " << rep.plcc << " SRCC " << rep.srcc << "\n";
  }
  write_file_atomic(a.out, os.str());
  std::cout << "wrote " << ks.size() << " rows to " << a.out << "\n";
  return 0;
}

std::size_t env_threads() {
  const char* v = std::getenv("MAX360IQ_THREADS");
  if (!v || !*v) return 1;
  try {
    std::size_t used = 0;
    const long n = std::stol(v, &used);
    if (used == std::string(v).size() && n >= 1) return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
  }
  throw PreconditionError(std::string("MAX360IQ_THREADS must be a positive integer, got '") + v + "'");
}

int fail(int code, const std::string& msg) {
  std::string one = msg;
  for (char& ch : one)
    if (ch == '\n') ch = ' ';
  std::cerr << "max360iq: error: " << one << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Blind 360-degree image quality assessment: data synthesis, training and evaluation."};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");

  Globals g;
  try {
    g.threads = env_threads();
  } catch (const PreconditionError& e) {
    return fail(1, e.what());
  }
  auto* seed_opt = app.add_option("--seed", g.seed, "Seed for every random choice");
  app.add_option("--threads", g.threads, "Worker threads for prediction (env MAX360IQ_THREADS)")
      ->check(CLI::PositiveNumber);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic panorama dataset");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--mode", sa.mode, "uniform or nonuniform")->check(CLI::IsMember({"uniform", "nonuniform"}));
  synth->add_option("--scenes", sa.scenes, "Number of scenes")->check(CLI::PositiveNumber);
  synth->add_option("--width", sa.width, "Panorama width (pixels)");
  synth->add_option("--height", sa.height, "Panorama height (pixels)");
  synth->add_option("--distortions", sa.distortions, "Comma list of blur, noise");
  synth->add_option("--levels", sa.levels, "Comma list of distortion levels (1-3)");
  auto* rec = synth->add_option("--recency", sa.recency, "Recency weight for nonuniform labels (omit for plain mean)");
  synth->add_option("--short-points", sa.short_points, "Scanpath length for 5 s conditions");
  synth->add_option("--long-points", sa.long_points, "Scanpath length for 15 s conditions");

  ExtractArgs ea;
  auto* extract = app.add_subcommand("extract", "Render viewports to PNG with JSON sidecars");
  extract->add_option("--manifest", ea.manifest, "Manifest CSV")->required();
  extract->add_option("--out", ea.out, "Output directory")->required();
  extract->add_option("--k", ea.k, "Viewports per sequence")->check(CLI::PositiveNumber);
  extract->add_option("--fov", ea.fov, "Field of view in degrees");
  extract->add_option("--size", ea.size, "Viewport side (pixels)")->check(CLI::PositiveNumber);
  extract->add_option("--mode", ea.mode, "scanpath or equator")->check(CLI::IsMember({"scanpath", "equator"}));

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train on the train split, validate on the held-out split");
  trn->add_option("--manifest", ta.manifest, "Manifest CSV")->required();
  trn->add_option("--config", ta.config, "Run config JSON (defaults when omitted)");
  trn->add_option("--set", ta.sets, "Override, e.g. train.lr=1e-3 (repeatable)");
  trn->add_option("--out", ta.out, "Output directory (last.ckpt, best.ckpt, train_log.jsonl)")->required();

  PredictArgs pa;
  auto* pred = app.add_subcommand("predict", "Score viewport sequences with a checkpoint");
  pred->add_option("--checkpoint", pa.checkpoint, "Checkpoint file")->required();
  pred->add_option("--manifest", pa.manifest, "Manifest CSV")->required();
  pred->add_option("--out", pa.out, "Predictions CSV (image_id,condition,pred,mos)")->required();
  pred->add_option("--split", pa.split, "all, train or test")->check(CLI::IsMember({"all", "train", "test"}));
  pred->add_option("--batch", pa.batch, "Sequences per forward pass")->check(CLI::PositiveNumber);

  EvalArgs va;
  auto* ev = app.add_subcommand("eval", "PLCC/SRCC/RMSE report from a predictions CSV");
  ev->add_option("--predictions", va.predictions, "Predictions CSV")->required();
  ev->add_option("--out", va.out, "Report JSON")->required();
  ev->add_option("--scatter", va.scatter, "Scatter CSV (pred,mapped_pred,mos,condition)");

  GradArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable component");
  gc->add_option("--seeds", ga.seeds, "Random seeds per component")->check(CLI::PositiveNumber);
  gc->add_flag("--primitives-only", ga.primitives_only, "Skip model-level components");
  gc->add_flag("--models-only", ga.models_only, "Skip primitives");
  gc->add_flag("--corrupt-gelu-backward", ga.corrupt, "Test hook: scale the gelu backward by 1.5");

  SweepArgs wa;
  auto* sweep = app.add_subcommand("sweep-k", "Retrain and evaluate for several viewport counts");
  sweep->add_option("--manifest", wa.manifest, "Manifest CSV")->required();
  sweep->add_option("--config", wa.config, "Run config JSON (defaults when omitted)");
  sweep->add_option("--set", wa.sets, "Override, e.g. train.epochs=5 (repeatable)");
  sweep->add_option("--k-list", wa.k_list, "Comma list of K values");
  sweep->add_option("--out", wa.out, "Output CSV (K,plcc,srcc,rmse)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail(1, e.what());
  }

  const bool seed_given = seed_opt->count() > 0;
  sa.use_recency = rec->count() > 0;
  try {
    if (*synth) return run_synth(sa, g);
    if (*extract) return run_extract(ea);
    if (*trn) return run_train(ta, g, seed_given);
    if (*pred) return run_predict(pa, g);
    if (*ev) return run_eval(va);
    if (*gc) return run_gradcheck(ga, g);
    if (*sweep) return run_sweep(wa, g, seed_given);
  } catch (const PreconditionError& e) {
    return fail(1, e.what());
  } catch (const DataError& e) {
    return fail(2, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(2, e.what());
  } catch (const NumericError& e) {
    return fail(3, e.what());
  } catch (const std::exception& e) {
    return fail(1, e.what());
  }
  return 1;
}
