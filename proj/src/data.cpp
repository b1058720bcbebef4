#include "max360iq/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "max360iq/errors.hpp"
#include "max360iq/image_io.hpp"
#include "max360iq/random.hpp"

namespace max360iq {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const char* kCsvHeader = "image_id,scene_id,erp_path,mos,distortion_tag,scanpath_file";

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string csv_field(const std::string& s, const std::string& what) {
  if (s.find_first_of(",\"\n\r") != std::string::npos)
    throw DataError("manifest field " + what + " may not contain commas, quotes or newlines: '" + s + "'");
  return s;
}

// Shortest round-tripping decimal form.
std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

[[noreturn]] void line_error(const fs::path& p, std::size_t line, const std::string& msg) {
  throw DataError(p.string() + ":" + std::to_string(line) + ": " + msg);
}

}  // namespace

std::string scanpaths_to_json(const ManifestEntry& e) {
  json j;
  j["image_id"] = e.image_id;
  j["scanpaths"] = json::array();
  for (const Scanpath& sp : e.scanpaths) {
    json s;
    s["condition"] = std::string(condition_name(sp.condition));
    if (auto it = e.condition_mos.find(sp.condition); it != e.condition_mos.end()) s["mos"] = it->second;
    json pts = json::array();
    for (const SphereCoord& c : sp.points) pts.push_back({c.lon(), c.lat()});
    s["points"] = std::move(pts);
    j["scanpaths"].push_back(std::move(s));
  }
  return j.dump() + "\n";
}

void scanpaths_from_json(const std::string& text, ManifestEntry& e) {
  const json j = json::parse(text);
  if (j.contains("image_id") && j["image_id"].get<std::string>() != e.image_id)
    throw DataError("scanpath sidecar belongs to '" + j["image_id"].get<std::string>() +
                    "', expected '" + e.image_id + "'");
  std::set<ViewingCondition> seen;
  for (const json& s : j.at("scanpaths")) {
    const std::string name = s.at("condition").get<std::string>();
    const auto cond = parse_condition(name);
    if (!cond) throw DataError("unknown viewing condition '" + name + "' for " + e.image_id);
    if (!seen.insert(*cond).second)
      throw DataError("duplicate condition " + name + " for " + e.image_id);
    Scanpath sp;
    sp.condition = *cond;
    for (const json& p : s.at("points")) {
      const double lon = p.at(0).get<double>(), lat = p.at(1).get<double>();
      if (!std::isfinite(lon) || !(std::abs(lat) <= kPi / 2))
        throw DataError("invalid scanpath point in " + e.image_id);
      sp.points.emplace_back(lon, lat);
    }
    if (sp.points.empty()) throw DataError("empty scanpath " + name + " for " + e.image_id);
    if (s.contains("mos")) {
      const double m = s["mos"].get<double>();
      if (!std::isfinite(m)) throw DataError("non-finite condition mos for " + e.image_id);
      e.condition_mos[*cond] = m;
    }
    e.scanpaths.push_back(std::move(sp));
  }
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line)) line_error(path, lineno, "missing JSON header");
  try {
    const json h = json::parse(line);
    const int schema = h.at("schema").get<int>();
    if (schema != kManifestSchema)
      line_error(path, lineno, "unsupported schema " + std::to_string(schema));
    const auto scale = h.at("mos_scale");
    m.mos_scale = {scale.at(0).get<double>(), scale.at(1).get<double>()};
    for (const json& c : h.value("conditions", json::array())) {
      const auto cond = parse_condition(c.get<std::string>());
      if (!cond) line_error(path, lineno, "unknown condition " + c.dump());
      m.conditions.push_back(*cond);
    }
  } catch (const json::exception& e) {
    line_error(path, lineno, std::string("bad header: ") + e.what());
  }
  ++lineno;
  if (!std::getline(in, line) || line != kCsvHeader)
    line_error(path, lineno, std::string("expected column header '") + kCsvHeader + "'");

  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 6) line_error(path, lineno, "expected 6 fields, got " + std::to_string(f.size()));
    ManifestEntry e;
    e.image_id = f[0];
    e.scene_id = f[1];
    e.erp_path = f[2];
    e.distortion_tag = f[4];
    e.scanpath_file = f[5];
    if (e.image_id.empty()) line_error(path, lineno, "empty image_id");
    if (e.scene_id.empty()) line_error(path, lineno, "empty scene_id");
    try {
      std::size_t used = 0;
      e.mos = std::stod(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      line_error(path, lineno, "bad mos '" + f[3] + "'");
    }
    if (!std::isfinite(e.mos)) line_error(path, lineno, "non-finite mos");
    if (!ids.insert(e.image_id).second) line_error(path, lineno, "duplicate image_id " + e.image_id);
    if (!fs::exists(m.resolve(e.erp_path)))
      line_error(path, lineno, "image not found: " + m.resolve(e.erp_path).string());
    if (!e.scanpath_file.empty()) {
      const fs::path sp = m.resolve(e.scanpath_file);
      if (!fs::exists(sp)) line_error(path, lineno, "scanpath file not found: " + sp.string());
      try {
        scanpaths_from_json(read_file(sp), e);
      } catch (const json::exception& ex) {
        line_error(path, lineno, sp.string() + ": " + ex.what());
      } catch (const DataError& ex) {
        line_error(path, lineno, ex.what());
      }
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

void save_manifest(const fs::path& path, const Manifest& m) {
  json h;
  h["schema"] = kManifestSchema;
  h["mos_scale"] = {m.mos_scale.lo, m.mos_scale.hi};
  h["conditions"] = json::array();
  for (ViewingCondition c : m.conditions) h["conditions"].push_back(std::string(condition_name(c)));
  std::ostringstream out;
  out << h.dump() << "\n" << kCsvHeader << "\n";
  const fs::path root = path.parent_path();
  for (const ManifestEntry& e : m.entries) {
    out << csv_field(e.image_id, "image_id") << ',' << csv_field(e.scene_id, "scene_id") << ','
        << csv_field(e.erp_path.generic_string(), "erp_path") << ',' << fmt_double(e.mos) << ','
        << csv_field(e.distortion_tag, "distortion_tag") << ','
        << csv_field(e.scanpath_file.generic_string(), "scanpath_file") << "\n";
    if (!e.scanpath_file.empty()) {
      const fs::path sp = e.scanpath_file.is_absolute() ? e.scanpath_file : root / e.scanpath_file;
      fs::create_directories(sp.parent_path());
      write_file_atomic(sp, scanpaths_to_json(e));
    }
  }
  write_file_atomic(path, out.str());
}

Split split_train_test(const std::vector<ManifestEntry>& entries, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw PreconditionError("split ratio must lie in (0, 1)");
  std::set<std::string> scene_set;
  for (const ManifestEntry& e : entries) scene_set.insert(e.scene_id);
  if (scene_set.size() < 2)
    throw DataError("split needs at least 2 distinct scenes, got " + std::to_string(scene_set.size()));
  std::vector<std::string> scenes(scene_set.begin(), scene_set.end());
  Rng rng = Rng::derive(seed, 0x5917);
  rng.shuffle(scenes);
  const double n = static_cast<double>(scenes.size());
  const std::size_t n_train = std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(ratio * n)),
                                                      1, scenes.size() - 1);
  const std::set<std::string> train_scenes(scenes.begin(), scenes.begin() + n_train);
  Split s;
  for (const ManifestEntry& e : entries) (train_scenes.count(e.scene_id) ? s.train : s.test).push_back(e);
  return s;
}

std::string distortion_name(DistortionKind k) {
  return k == DistortionKind::GaussianBlur ? "gaussian_blur" : "gaussian_noise";
}

std::string synth_mode_name(SynthMode m) { return m == SynthMode::Uniform ? "uniform" : "nonuniform"; }

SynthMode parse_synth_mode(const std::string& s) {
  if (s == "uniform") return SynthMode::Uniform;
  if (s == "nonuniform") return SynthMode::Nonuniform;
  throw PreconditionError("unknown synth mode '" + s + "' (uniform, nonuniform)");
}

void SynthSpec::validate() const {
  if (n_scenes < 1) throw PreconditionError("synth: n_scenes must be >= 1");
  if (width < 4 || height < 2 || width % 2 || height % 2)
    throw PreconditionError("synth: image sizes must be even");
  if (distortions.empty() || levels.empty()) throw PreconditionError("synth: empty distortion grid");
  for (int l : levels)
    if (l < 0 || l > 3) throw PreconditionError("synth: levels must lie in 0..3");
  if (short_points < 2 || long_points < 2) throw PreconditionError("synth: scanpaths need >= 2 points");
  if (recency_lambda && !std::isfinite(*recency_lambda))
    throw PreconditionError("synth: recency lambda must be finite");
}

double synth_quality(int level) { return 5.0 - level * 4.0 / 3.0; }

ErpImage synth_scene(std::size_t width, std::size_t height, std::uint64_t seed) {
  Rng rng(seed);
  struct Wave {
    double wx, wy, wz, phase;
  };
  auto waves = [&](std::initializer_list<double> freqs, int per_octave) {
    std::vector<Wave> out;
    for (double f : freqs)
      for (int i = 0; i < per_octave; ++i) {
        double x = rng.normal(), y = rng.normal(), z = rng.normal();
        const double n = std::max(std::sqrt(x * x + y * y + z * z), 1e-12);
        out.push_back({f * x / n, f * y / n, f * z / n, rng.uniform(0, kTwoPi)});
      }
    return out;
  };
  const std::vector<Wave> luma = waves({4, 8, 16, 32}, 6);
  std::vector<Wave> chroma[3];
  double tint[3];
  for (int c = 0; c < 3; ++c) {
    chroma[c] = waves({2, 4}, 3);
    tint[c] = rng.uniform(-0.1, 0.1);
  }
  auto field = [](const std::vector<Wave>& ws, double x, double y, double z) {
    double s = 0;
    for (const Wave& w : ws) s += std::sin(w.wx * x + w.wy * y + w.wz * z + w.phase);
    return s / std::sqrt(0.5 * static_cast<double>(ws.size()));  // unit variance
  };
  ErpImage img(width, height);
  Tensor px = img.pixels();
  for (std::size_t r = 0; r < height; ++r) {
    const double lat = kPi / 2 - (static_cast<double>(r) + 0.5) / static_cast<double>(height) * kPi;
    for (std::size_t col = 0; col < width; ++col) {
      const double lon = (static_cast<double>(col) + 0.5) / static_cast<double>(width) * kTwoPi - kPi;
      const double x = std::cos(lat) * std::sin(lon), y = std::sin(lat), z = std::cos(lat) * std::cos(lon);
      const double l = field(luma, x, y, z);
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = 0.5 + tint[c] + 0.13 * l + 0.05 * field(chroma[c], x, y, z);
        px[(c * height + r) * width + col] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return ErpImage(std::move(px));
}

namespace {

// Separable Gaussian: longitude wraps, latitude clamps.
Tensor gaussian_blur(const Tensor& px, double sigma) {
  const std::size_t H = px.dim(1), W = px.dim(2);
  const long radius = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double ksum = 0;
  for (long i = -radius; i <= radius; ++i) ksum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= ksum;
  Tensor tmp(px.shape()), out(px.shape());
  const long w = static_cast<long>(W), h = static_cast<long>(H);
  for (std::size_t c = 0; c < 3; ++c)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        double s = 0;
        for (long i = -radius; i <= radius; ++i) s += k[i + radius] * px[(c * H + y) * W + ((x + i) % w + w) % w];
        tmp[(c * H + y) * W + x] = s;
      }
  for (std::size_t c = 0; c < 3; ++c)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        double s = 0;
        for (long i = -radius; i <= radius; ++i)
          s += k[i + radius] * tmp[(c * H + std::clamp(y + i, 0L, h - 1)) * W + x];
        out[(c * H + y) * W + x] = s;
      }
  return out;
}

Tensor band_mask(std::size_t width, std::size_t height, double center, double half_width) {
  Tensor m({3, height, width});
  for (std::size_t col = 0; col < width; ++col) {
    const double lon = (static_cast<double>(col) + 0.5) / static_cast<double>(width) * kTwoPi - kPi;
    const double d = std::abs(std::remainder(lon - center, kTwoPi));
    if (d < half_width)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t r = 0; r < height; ++r) m[(c * height + r) * width + col] = 1.0;
  }
  return m;
}

}  // namespace

ErpImage apply_distortion(const ErpImage& img, DistortionKind kind, int level, std::uint64_t seed) {
  if (level < 0 || level > 3) throw PreconditionError("distortion level must lie in 0..3");
  if (level == 0) return img;
  if (kind == DistortionKind::GaussianBlur) return ErpImage(gaussian_blur(img.pixels(), 0.6 * level));
  Rng rng(seed);
  Tensor px = img.pixels();
  for (double& v : px.storage()) v = std::clamp(v + rng.normal(0.0, 0.03 * level), 0.0, 1.0);
  return ErpImage(std::move(px));
}

ErpImage blend_by_longitude_band(const ErpImage& clean, const ErpImage& distorted,
                                 double band_center, double half_width) {
  const Tensor m = band_mask(clean.width(), clean.height(), band_center, half_width);
  Tensor px = clean.pixels();
  for (std::size_t i = 0; i < px.numel(); ++i)
    if (m[i] != 0.0) px[i] = distorted.pixels()[i];
  return ErpImage(std::move(px));
}

namespace {

ErpImage coverage_mask(double band_center, double half_width) {
  return ErpImage(band_mask(256, 128, band_center, half_width));
}

// Same pixel-column rule as the blend, seen through the viewport.
double mask_coverage(const ErpImage& mask, const ViewportSpec& spec) {
  ViewportSpec s = spec;
  s.out_size = 16;
  const Tensor v = gnomonic_project(mask, s);
  double acc = 0;
  for (std::size_t i = 0; i < 16 * 16; ++i) acc += v[i];
  return acc / (16.0 * 16.0);
}

}  // namespace

double band_coverage(const ViewportSpec& spec, double band_center, double half_width) {
  return mask_coverage(coverage_mask(band_center, half_width), spec);
}

namespace {

Scanpath sweep_path(ViewingCondition cond, double start, double sweep, double dir, std::size_t T,
                    Rng& rng) {
  Scanpath sp;
  sp.condition = cond;
  const double amp = rng.uniform(0.05, 0.25), cycles = rng.uniform(0.5, 1.5), ph = rng.uniform(0, kTwoPi);
  for (std::size_t t = 0; t < T; ++t) {
    const double u = static_cast<double>(t) / static_cast<double>(T - 1);
    sp.points.emplace_back(start + dir * sweep * u, amp * std::sin(kTwoPi * cycles * u + ph));
  }
  return sp;
}

double recency_label(const Scanpath& sp, double center, double half_width, int level,
                     std::optional<double> lambda) {
  const std::size_t T = sp.points.size();
  const ErpImage mask = coverage_mask(center, half_width);
  double num = 0, den = 0;
  for (std::size_t t = 0; t < T; ++t) {
    const double w = lambda ? std::exp(*lambda * static_cast<double>(t) / static_cast<double>(T - 1)) : 1.0;
    const double cov = mask_coverage(mask, {sp.points[t], kPi / 2, 16});
    num += w * (5.0 - level * 4.0 / 3.0 * cov);
    den += w;
  }
  return num / den;
}

}  // namespace

Manifest generate_synthetic(const SynthSpec& spec, const fs::path& out_dir) {
  spec.validate();
  fs::create_directories(out_dir / "images");
  Manifest m;
  m.root = out_dir;
  if (spec.mode == SynthMode::Nonuniform)
    m.conditions.assign(std::begin(kAllConditions), std::end(kAllConditions));
  std::uint64_t image_index = 0;
  char scene_id[32];
  for (std::size_t s = 0; s < spec.n_scenes; ++s) {
    std::snprintf(scene_id, sizeof scene_id, "s%03zu", s);
    const ErpImage clean = synth_scene(spec.width, spec.height, Rng::derive(spec.seed, s).next_u64());
    for (DistortionKind d : spec.distortions)
      for (int level : spec.levels) {
        Rng rng = Rng::derive(spec.seed, 0x100000 + image_index++);
        ManifestEntry e;
        e.scene_id = scene_id;
        e.image_id = std::string(scene_id) + "_" + distortion_name(d) + "_" + std::to_string(level);
        e.distortion_tag = distortion_name(d) + ":" + std::to_string(level);
        e.erp_path = fs::path("images") / (e.image_id + ".png");
        const ErpImage distorted = apply_distortion(clean, d, level, rng.next_u64());
        if (spec.mode == SynthMode::Uniform) {
          e.mos = synth_quality(level);
          write_png(out_dir / e.erp_path, distorted.pixels());
        } else {
          const double center = rng.uniform(-kPi, kPi), half = kPi / 4;
          const double dir = rng.uniform() < 0.5 ? -1.0 : 1.0;
          write_png(out_dir / e.erp_path,
                    blend_by_longitude_band(clean, distorted, center, half).pixels());
          e.distortion_tag += "@band";
          // Good starts opposite the band, Bad inside it; long paths sweep twice as far.
          e.scanpaths = {
              sweep_path(ViewingCondition::Good5s, center + kPi, kPi / 2, dir, spec.short_points, rng),
              sweep_path(ViewingCondition::Bad5s, center, kPi / 2, dir, spec.short_points, rng),
              sweep_path(ViewingCondition::Good15s, center + kPi, kPi, dir, spec.long_points, rng),
              sweep_path(ViewingCondition::Bad15s, center, kPi, dir, spec.long_points, rng)};
          double sum = 0;
          for (const Scanpath& sp : e.scanpaths) {
            const double q = recency_label(sp, center, half, level, spec.recency_lambda);
            e.condition_mos[sp.condition] = q;
            sum += q;
          }
          e.mos = sum / static_cast<double>(e.scanpaths.size());
          e.scanpath_file = fs::path("scanpaths") / (e.image_id + ".json");
        }
        m.entries.push_back(std::move(e));
      }
  }
  save_manifest(out_dir / "manifest.csv", m);
  return m;
}

Tensor stack_sequence(const ViewportSequence& seq) {
  if (seq.viewports.empty()) throw PreconditionError("empty viewport sequence");
  const Shape& vs = seq.viewports.front().shape();
  Shape shape{seq.viewports.size()};
  shape.insert(shape.end(), vs.begin(), vs.end());
  Tensor out(shape);
  std::size_t off = 0;
  for (const Tensor& v : seq.viewports) {
    if (v.shape() != vs) throw PreconditionError("viewports in a sequence differ in shape");
    std::copy(v.data().begin(), v.data().end(), out.data().begin() + off);
    off += v.numel();
  }
  return out;
}

std::vector<Sample> build_samples(const Manifest& m, const std::vector<ManifestEntry>& entries,
                                  const ExtractOptions& opt, SequenceMode mode) {
  std::vector<Sample> out;
  for (const ManifestEntry& e : entries) {
    const ErpImage img = read_image(m.resolve(e.erp_path));
    if (mode == SequenceMode::Scanpath && !e.scanpaths.empty()) {
      for (const ViewportSequence& seq : extract_sequences(img, e.scanpaths, opt, e.image_id)) {
        const auto it = e.condition_mos.find(*seq.condition);
        out.push_back({stack_sequence(seq), it != e.condition_mos.end() ? it->second : e.mos,
                       e.image_id, seq.condition});
      }
    } else {
      out.push_back({stack_sequence(extract_equator_sequence(img, opt, e.image_id)), e.mos, e.image_id,
                     std::nullopt});
    }
  }
  return out;
}

}  // namespace max360iq
