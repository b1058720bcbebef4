#pragma once

#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "max360iq/tensor.hpp"

namespace max360iq {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Point on the unit sphere. lon is normalized into [-pi, pi) at
/// construction; lat must lie in [-pi/2, pi/2].
class SphereCoord {
 public:
  SphereCoord() = default;
  SphereCoord(double lon, double lat);

  double lon() const { return lon_; }
  double lat() const { return lat_; }
  bool operator==(const SphereCoord&) const = default;

 private:
  double lon_ = 0.0;
  double lat_ = 0.0;
};

/// Equirectangular panorama, planar 3xHxW storage with values in [0,1].
class ErpImage {
 public:
  ErpImage() = default;
  explicit ErpImage(Tensor pixels);
  ErpImage(std::size_t width, std::size_t height, double fill = 0.0);

  std::size_t width() const { return pixels_.dim(2); }
  std::size_t height() const { return pixels_.dim(1); }
  const Tensor& pixels() const { return pixels_; }

  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels_[(c * height() + y) * width() + x];
  }

 private:
  Tensor pixels_{Shape{3, 1, 2}, 0.0};
};

enum class ViewingCondition { Good5s, Bad5s, Good15s, Bad15s };

inline constexpr ViewingCondition kAllConditions[] = {
    ViewingCondition::Good5s, ViewingCondition::Bad5s, ViewingCondition::Good15s,
    ViewingCondition::Bad15s};

std::string_view condition_name(ViewingCondition c);
std::optional<ViewingCondition> parse_condition(std::string_view name);

struct Scanpath {
  std::vector<SphereCoord> points;  // time order
  ViewingCondition condition = ViewingCondition::Good5s;
};

struct ViewportSpec {
  SphereCoord center;
  double fov = kPi / 2.0;
  std::size_t out_size = 32;

  void validate() const;
};

struct ViewportSequence {
  std::vector<Tensor> viewports;  // each 3 x S x S
  std::vector<ViewportSpec> specs;
  std::optional<ViewingCondition> condition;  // empty for equator sequences
  std::string image_id;

  std::size_t size() const { return viewports.size(); }
};

struct ErpPoint {
  double u;  // continuous column, wraps modulo width
  double v;  // continuous row, clamped to [0, height)
};

ErpPoint sphere_to_erp(const SphereCoord& c, std::size_t width, std::size_t height);

// Bilinear sample with pixel centers at (x + 0.5, y + 0.5); longitudinal
// wraparound, latitude clamped at the poles.
double sample_bilinear(const ErpImage& img, std::size_t channel, double u, double v);

// Rectilinear perspective view centered on spec.center (Y-up camera).
Tensor gnomonic_project(const ErpImage& img, const ViewportSpec& spec);

// Time indices picked from a T-point scanpath for K viewports.
std::vector<std::size_t> scanpath_indices(std::size_t T, std::size_t K);
std::vector<SphereCoord> sample_scanpath(const Scanpath& sp, std::size_t K);

std::vector<ViewportSpec> equator_viewports(std::size_t K, double fov, std::size_t out_size);

struct ExtractOptions {
  std::size_t K = 7;
  double fov = kPi / 2.0;
  std::size_t out_size = 32;
};

// One sequence per scanpath, viewports in scanpath time order.
std::vector<ViewportSequence> extract_sequences(const ErpImage& img,
                                                std::span<const Scanpath> scanpaths,
                                                const ExtractOptions& opt,
                                                const std::string& image_id = {});
// Single sequence of equator viewports.
ViewportSequence extract_equator_sequence(const ErpImage& img, const ExtractOptions& opt,
                                          const std::string& image_id = {});

}  // namespace max360iq
