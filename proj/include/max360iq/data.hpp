#pragma once
// Dataset manifest (CSV with a JSON header line, JSON scanpath sidecars),
// scene-grouped splitting, and the synthetic blur/noise panorama generator.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "max360iq/sphere.hpp"
#include "max360iq/tensor.hpp"

namespace max360iq {

inline constexpr int kManifestSchema = 1;

struct MosScale {
  double lo = 1.0;
  double hi = 5.0;
};

struct ManifestEntry {
  std::string image_id;
  std::string scene_id;
  std::filesystem::path erp_path;  // as written; resolved against the manifest dir
  double mos = 0.0;
  std::string distortion_tag;
  std::filesystem::path scanpath_file;  // empty when the image has no scanpaths
  std::vector<Scanpath> scanpaths;
  std::map<ViewingCondition, double> condition_mos;
};

struct Manifest {
  MosScale mos_scale;
  std::vector<ViewingCondition> conditions;
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;  // directory relative paths resolve against

  std::filesystem::path resolve(const std::filesystem::path& p) const {
    return p.is_absolute() ? p : root / p;
  }
};

// Throws DataError with the 1-based line number on malformed input, and on
// duplicate ids or unresolvable image/scanpath files.
Manifest load_manifest(const std::filesystem::path& path);
// Writes the manifest CSV and every entry's scanpath sidecar (atomic writes).
void save_manifest(const std::filesystem::path& path, const Manifest& m);

// Sidecar: {"image_id", "scanpaths": [{"condition", "mos", "points": [[lon, lat], ...]}]}
std::string scanpaths_to_json(const ManifestEntry& e);
void scanpaths_from_json(const std::string& text, ManifestEntry& e);

struct Split {
  std::vector<ManifestEntry> train;
  std::vector<ManifestEntry> test;
};

// Whole scenes go to one side. Scene ids are sorted, shuffled with `seed` and
// the first round(ratio * n_scenes) (at least 1, at most n-1) become train.
Split split_train_test(const std::vector<ManifestEntry>& entries, double ratio, std::uint64_t seed);

enum class DistortionKind { GaussianBlur, GaussianNoise };
enum class SynthMode { Uniform, Nonuniform };

std::string distortion_name(DistortionKind k);
std::string synth_mode_name(SynthMode m);
SynthMode parse_synth_mode(const std::string& s);

struct SynthSpec {
  std::size_t n_scenes = 40;
  std::size_t width = 128;
  std::size_t height = 64;
  std::vector<DistortionKind> distortions{DistortionKind::GaussianBlur, DistortionKind::GaussianNoise};
  std::vector<int> levels{1, 2, 3};  // 0 = pristine
  SynthMode mode = SynthMode::Uniform;
  std::optional<double> recency_lambda;  // nonuniform labels; empty = plain mean
  std::size_t short_points = 50;         // 5 s scanpath length
  std::size_t long_points = 150;         // 15 s
  std::uint64_t seed = 0;

  void validate() const;
};

// Smooth seamless colour field on the sphere, values in [0,1].
ErpImage synth_scene(std::size_t width, std::size_t height, std::uint64_t seed);
ErpImage apply_distortion(const ErpImage& img, DistortionKind kind, int level, std::uint64_t seed);
// Per-pixel blend: mask 1 takes `distorted`, 0 keeps `clean`.
ErpImage blend_by_longitude_band(const ErpImage& clean, const ErpImage& distorted,
                                 double band_center, double half_width);

// 5 - level * 4/3 on the [1,5] scale, level in 0..3.
double synth_quality(int level);
// Fraction of a viewport's pixels falling in the band |lon - center| < half_width.
double band_coverage(const ViewportSpec& spec, double band_center, double half_width);

// Writes images (PNG), sidecars and manifest.csv into out_dir; returns the
// manifest as written.
Manifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir);

// One training/evaluation item: a viewport sequence and its quality label.
struct Sample {
  Tensor viewports;  // [K, 3, S, S]
  double label = 0.0;
  std::string image_id;
  std::optional<ViewingCondition> condition;
};

enum class SequenceMode { Scanpath, Equator };

// Scanpath mode: one sample per scanpath, labelled with that condition's mos
// when present, else the image mos. Equator mode (or entries without
// scanpaths): one sample per image.
std::vector<Sample> build_samples(const Manifest& m, const std::vector<ManifestEntry>& entries,
                                  const ExtractOptions& opt, SequenceMode mode);

Tensor stack_sequence(const ViewportSequence& seq);

}  // namespace max360iq
