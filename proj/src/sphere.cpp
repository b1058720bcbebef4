#include "max360iq/sphere.hpp"

#include <algorithm>
#include <cmath>

#include "max360iq/errors.hpp"

namespace max360iq {

SphereCoord::SphereCoord(double lon, double lat) {
  if (!std::isfinite(lon) || !std::isfinite(lat))
    throw PreconditionError("sphere coordinate must be finite");
  if (lat < -kPi / 2.0 || lat > kPi / 2.0)
    throw PreconditionError("latitude out of [-pi/2, pi/2]: " + std::to_string(lat));
  // remainder() is exact, so lon and lon + 2pi (when representable) agree bitwise.
  double r = std::remainder(lon, kTwoPi);
  if (r >= kPi) r -= kTwoPi;
  if (r < -kPi) r = -kPi;
  lon_ = r;
  lat_ = lat;
}

ErpImage::ErpImage(Tensor pixels) : pixels_(std::move(pixels)) {
  if (pixels_.rank() != 3 || pixels_.dim(0) != 3)
    throw PreconditionError("ERP image must be 3xHxW, got " + shape_str(pixels_.shape()));
  if (pixels_.dim(2) < 2) throw PreconditionError("ERP image width must be at least 2");
  for (double v : pixels_.data())
    if (!std::isfinite(v) || v < 0.0 || v > 1.0)
      throw PreconditionError("ERP image values must lie in [0,1]");
}

ErpImage::ErpImage(std::size_t width, std::size_t height, double fill)
    : ErpImage(Tensor({3, height, width}, fill)) {}

std::string_view condition_name(ViewingCondition c) {
  switch (c) {
    case ViewingCondition::Good5s: return "Good5s";
    case ViewingCondition::Bad5s: return "Bad5s";
    case ViewingCondition::Good15s: return "Good15s";
    case ViewingCondition::Bad15s: return "Bad15s";
  }
  return "?";
}

std::optional<ViewingCondition> parse_condition(std::string_view name) {
  for (ViewingCondition c : kAllConditions)
    if (condition_name(c) == name) return c;
  return std::nullopt;
}

void ViewportSpec::validate() const {
  if (!(fov > 0.0 && fov < kPi)) throw PreconditionError("viewport fov must lie in (0, pi)");
  if (out_size < 2) throw PreconditionError("viewport size must be at least 2");
}

ErpPoint sphere_to_erp(const SphereCoord& c, std::size_t width, std::size_t height) {
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  double u = (c.lon() + kPi) / kTwoPi * w;
  u = std::fmod(u, w);
  if (u < 0.0) u += w;
  double v = (kPi / 2.0 - c.lat()) / kPi * h;
  v = std::clamp(v, 0.0, std::nextafter(h, 0.0));
  return {u, v};
}

double sample_bilinear(const ErpImage& img, std::size_t channel, double u, double v) {
  const long w = static_cast<long>(img.width()), h = static_cast<long>(img.height());
  const double fx = u - 0.5, fy = v - 0.5;
  const double x0f = std::floor(fx), y0f = std::floor(fy);
  const double ax = fx - x0f, ay = fy - y0f;
  long x0 = static_cast<long>(x0f) % w;
  if (x0 < 0) x0 += w;
  const long x1 = (x0 + 1) % w;
  const long y0 = std::clamp(static_cast<long>(y0f), 0L, h - 1);
  const long y1 = std::clamp(static_cast<long>(y0f) + 1, 0L, h - 1);
  const double p00 = img.at(channel, y0, x0), p01 = img.at(channel, y0, x1);
  const double p10 = img.at(channel, y1, x0), p11 = img.at(channel, y1, x1);
  return (1.0 - ay) * ((1.0 - ax) * p00 + ax * p01) + ay * ((1.0 - ax) * p10 + ax * p11);
}

Tensor gnomonic_project(const ErpImage& img, const ViewportSpec& spec) {
  spec.validate();
  const std::size_t S = spec.out_size;
  const double t = std::tan(spec.fov / 2.0);
  const double slat = std::sin(spec.center.lat()), clat = std::cos(spec.center.lat());
  const double slon = std::sin(spec.center.lon()), clon = std::cos(spec.center.lon());
  Tensor out({3, S, S});
  for (std::size_t i = 0; i < S; ++i) {
    const double y = (1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(S)) * t;
    for (std::size_t j = 0; j < S; ++j) {
      const double x = (2.0 * (static_cast<double>(j) + 0.5) / static_cast<double>(S) - 1.0) * t;
      // pitch about X, then yaw about Y
      const double y1 = y * clat + slat;
      const double z1 = -y * slat + clat;
      const double x2 = x * clon + z1 * slon;
      const double z2 = -x * slon + z1 * clon;
      const double lon = std::atan2(x2, z2);
      const double lat = std::atan2(y1, std::hypot(x2, z2));
      const ErpPoint p = sphere_to_erp(SphereCoord(lon, lat), img.width(), img.height());
      for (std::size_t c = 0; c < 3; ++c)
        out[(c * S + i) * S + j] = sample_bilinear(img, c, p.u, p.v);
    }
  }
  return out;
}

std::vector<std::size_t> scanpath_indices(std::size_t T, std::size_t K) {
  if (T == 0) throw PreconditionError("empty scanpath");
  if (K == 0) throw PreconditionError("viewport count must be at least 1");
  std::vector<std::size_t> idx;
  idx.reserve(K);
  if (K == 1) {
    idx.push_back(0);
  } else if (K >= T) {
    for (std::size_t i = 0; i < K; ++i) idx.push_back(std::min(i, T - 1));
  } else {
    // round_half_up(i (T-1) / (K-1)) in integer arithmetic
    for (std::size_t i = 0; i < K; ++i)
      idx.push_back((2 * i * (T - 1) + (K - 1)) / (2 * (K - 1)));
  }
  return idx;
}

std::vector<SphereCoord> sample_scanpath(const Scanpath& sp, std::size_t K) {
  std::vector<SphereCoord> out;
  for (std::size_t i : scanpath_indices(sp.points.size(), K)) out.push_back(sp.points[i]);
  return out;
}

std::vector<ViewportSpec> equator_viewports(std::size_t K, double fov, std::size_t out_size) {
  if (K == 0) throw PreconditionError("viewport count must be at least 1");
  std::vector<ViewportSpec> specs;
  specs.reserve(K);
  for (std::size_t k = 0; k < K; ++k) {
    const double lon = -kPi + kTwoPi * static_cast<double>(k) / static_cast<double>(K);
    ViewportSpec s{SphereCoord(lon, 0.0), fov, out_size};
    s.validate();
    specs.push_back(s);
  }
  return specs;
}

namespace {
ViewportSequence render(const ErpImage& img, std::vector<ViewportSpec> specs,
                        std::optional<ViewingCondition> cond, const std::string& image_id) {
  ViewportSequence seq;
  seq.condition = cond;
  seq.image_id = image_id;
  for (const ViewportSpec& s : specs) seq.viewports.push_back(gnomonic_project(img, s));
  seq.specs = std::move(specs);
  return seq;
}
}  // namespace

std::vector<ViewportSequence> extract_sequences(const ErpImage& img,
                                                std::span<const Scanpath> scanpaths,
                                                const ExtractOptions& opt,
                                                const std::string& image_id) {
  std::vector<ViewportSequence> out;
  out.reserve(scanpaths.size());
  for (const Scanpath& sp : scanpaths) {
    std::vector<ViewportSpec> specs;
    for (const SphereCoord& c : sample_scanpath(sp, opt.K))
      specs.push_back({c, opt.fov, opt.out_size});
    out.push_back(render(img, std::move(specs), sp.condition, image_id));
  }
  return out;
}

ViewportSequence extract_equator_sequence(const ErpImage& img, const ExtractOptions& opt,
                                          const std::string& image_id) {
  return render(img, equator_viewports(opt.K, opt.fov, opt.out_size), std::nullopt, image_id);
}

}  // namespace max360iq
