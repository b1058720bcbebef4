#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "max360iq/errors.hpp"
#include "max360iq/image_io.hpp"
#include "max360iq/sphere.hpp"
#include "test_util.hpp"

using namespace max360iq;
using max360iq::testing::random_tensor;

namespace {

ErpImage random_erp(std::size_t w, std::size_t h, Rng& rng) {
  return ErpImage(random_tensor({3, h, w}, rng, 0.0, 1.0));
}

// Independent bilinear evaluation at a continuous ERP position, pixel
// centers at +0.5, horizontal wrap, vertical clamp.
double bilinear_oracle(const ErpImage& img, std::size_t c, double u, double v) {
  const int w = static_cast<int>(img.width()), h = static_cast<int>(img.height());
  const double fx = u - 0.5, fy = v - 0.5;
  const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
  double acc = 0.0;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      const double wx = dx ? fx - x0 : 1.0 - (fx - x0);
      const double wy = dy ? fy - y0 : 1.0 - (fy - y0);
      const int xx = ((x0 + dx) % w + w) % w;
      const int yy = std::min(std::max(y0 + dy, 0), h - 1);
      acc += wx * wy * img.at(c, yy, xx);
    }
  return acc;
}

}  // namespace

TEST(SphereToErp, StatedExamples) {
  auto a = sphere_to_erp(SphereCoord(0, 0), 100, 50);
  EXPECT_DOUBLE_EQ(a.u, 50.0);
  EXPECT_DOUBLE_EQ(a.v, 25.0);
  auto b = sphere_to_erp(SphereCoord(-kPi, kPi / 2), 100, 50);
  EXPECT_DOUBLE_EQ(b.u, 0.0);
  EXPECT_DOUBLE_EQ(b.v, 0.0);
  auto c = sphere_to_erp(SphereCoord(kPi / 2, -kPi / 4), 360, 180);
  EXPECT_NEAR(c.u, 270.0, 1e-12);
  EXPECT_NEAR(c.v, 135.0, 1e-12);
  auto pole = sphere_to_erp(SphereCoord(0.3, -kPi / 2), 100, 50);
  EXPECT_LT(pole.v, 50.0);
}

TEST(SphereCoord, NormalizesLongitudeAndRejectsBadLatitude) {
  EXPECT_DOUBLE_EQ(SphereCoord(kPi, 0).lon(), -kPi);
  EXPECT_NEAR(SphereCoord(3 * kPi / 2, 0).lon(), -kPi / 2, 1e-15);
  EXPECT_THROW(SphereCoord(0, 2.0), PreconditionError);
  EXPECT_THROW(SphereCoord(NAN, 0), PreconditionError);
  EXPECT_THROW((ViewportSpec{SphereCoord(), kPi, 32}.validate()), PreconditionError);
  EXPECT_THROW((ViewportSpec{SphereCoord(), 1.0, 1}.validate()), PreconditionError);
}

TEST(Gnomonic, ConstantImageStaysConstant) {
  ErpImage img(64, 32, 0.5);
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    ViewportSpec spec{SphereCoord(rng.uniform(-4, 4), rng.uniform(-kPi / 2, kPi / 2)),
                      rng.uniform(0.2, 3.0), 9};
    const Tensor vp = gnomonic_project(img, spec);
    for (double v : vp.data()) EXPECT_NEAR(v, 0.5, 1e-12);
  }
}

TEST(Gnomonic, CenterPixelMatchesInverseMapping) {
  Rng rng(5);
  const ErpImage img = random_erp(100, 50, rng);
  const Tensor vp = gnomonic_project(img, {SphereCoord(0, 0), kPi / 2, 33});
  for (std::size_t c = 0; c < 3; ++c)
    EXPECT_NEAR(vp[(c * 33 + 16) * 33 + 16], bilinear_oracle(img, c, 50.0, 25.0), 1e-12);

  // Off-center viewport: central ray hits sphere_to_erp(center).
  const SphereCoord center(1.1, -0.4);
  const Tensor vp2 = gnomonic_project(img, {center, 1.2, 21});
  const ErpPoint p = sphere_to_erp(center, 100, 50);
  for (std::size_t c = 0; c < 3; ++c)
    EXPECT_NEAR(vp2[(c * 21 + 10) * 21 + 10], bilinear_oracle(img, c, p.u, p.v), 1e-9);
}

TEST(Gnomonic, FullTurnInLongitudeIsBitExact) {
  Rng rng(7);
  const ErpImage img = random_erp(64, 32, rng);
  for (int trial = 0; trial < 20; ++trial) {
    // Dyadic longitudes so lon + 2pi is exactly representable.
    const double lon = std::ldexp(static_cast<double>(rng.below(1u << 21)) - (1u << 20), -18);
    const double lat = rng.uniform(-1.4, 1.4);
    const Tensor a = gnomonic_project(img, {SphereCoord(lon, lat), kPi / 2, 8});
    const Tensor b = gnomonic_project(img, {SphereCoord(lon + kTwoPi, lat), kPi / 2, 8});
    const Tensor c = gnomonic_project(img, {SphereCoord(lon - kTwoPi, lat), kPi / 2, 8});
    EXPECT_EQ(a, b);
    EXPECT_EQ(a, c);
  }
}

TEST(Gnomonic, OutputWithinSourceRange) {
  Rng rng(9);
  Tensor px = random_tensor({3, 16, 32}, rng, 0.2, 0.7);
  const ErpImage img(px);
  double lo = 1, hi = 0;
  for (double v : px.data()) lo = std::min(lo, v), hi = std::max(hi, v);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor vp = gnomonic_project(
        img, {SphereCoord(rng.uniform(-kPi, kPi), rng.uniform(-1.5, 1.5)), 1.5, 12});
    for (double v : vp.data()) {
      EXPECT_GE(v, lo);
      EXPECT_LE(v, hi);
    }
  }
}

TEST(Gnomonic, PolarViewportIsFinite) {
  Rng rng(10);
  const ErpImage img = random_erp(32, 16, rng);
  const Tensor vp = gnomonic_project(img, {SphereCoord(0.0, kPi / 2), kPi / 2, 16});
  EXPECT_TRUE(vp.all_finite());
}

TEST(ScanpathSampling, StatedIndices) {
  EXPECT_EQ(scanpath_indices(300, 7), (std::vector<std::size_t>{0, 50, 100, 150, 199, 249, 299}));
  EXPECT_EQ(scanpath_indices(300, 1), (std::vector<std::size_t>{0}));
  EXPECT_EQ(scanpath_indices(3, 3), (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(scanpath_indices(3, 5), (std::vector<std::size_t>{0, 1, 2, 2, 2}));
  EXPECT_THROW(scanpath_indices(0, 3), PreconditionError);
  Scanpath empty;
  EXPECT_THROW(sample_scanpath(empty, 3), PreconditionError);
}

TEST(ScanpathSampling, MonotoneAndCoversEndpoints) {
  for (std::size_t T = 1; T <= 40; ++T)
    for (std::size_t K = 1; K <= 12; ++K) {
      const auto idx = scanpath_indices(T, K);
      ASSERT_EQ(idx.size(), K);
      EXPECT_TRUE(std::is_sorted(idx.begin(), idx.end()));
      EXPECT_EQ(idx.front(), 0u);
      if (K >= 2 && T >= 2) EXPECT_EQ(idx.back(), T - 1);
      for (std::size_t i : idx) EXPECT_LT(i, T);
    }
}

TEST(EquatorViewports, QuadrantsAndSpacing) {
  const auto q = equator_viewports(4, kPi / 2, 32);
  const double expect[] = {-kPi, -kPi / 2, 0.0, kPi / 2};
  for (int k = 0; k < 4; ++k) {
    EXPECT_DOUBLE_EQ(q[k].center.lon(), expect[k]);
    EXPECT_EQ(q[k].center.lat(), 0.0);
  }
  EXPECT_DOUBLE_EQ(equator_viewports(1, kPi / 2, 32)[0].center.lon(), -kPi);
  const auto e = equator_viewports(8, kPi / 2, 32);
  for (int k = 0; k + 1 < 8; ++k)
    EXPECT_NEAR(e[k + 1].center.lon() - e[k].center.lon(), kPi / 4, 1e-15);
  EXPECT_THROW(equator_viewports(0, kPi / 2, 32), PreconditionError);
}

TEST(EquatorViewports, RotationByOneStepIsCyclicRelabel) {
  for (std::size_t K : {3u, 5u, 7u, 12u}) {
    const auto specs = equator_viewports(K, kPi / 2, 16);
    for (std::size_t k = 0; k < K; ++k) {
      const SphereCoord rotated(specs[k].center.lon() + kTwoPi / static_cast<double>(K), 0.0);
      const double target = specs[(k + 1) % K].center.lon();
      double d = std::remainder(rotated.lon() - target, kTwoPi);
      EXPECT_NEAR(d, 0.0, 1e-12);
    }
  }
}

TEST(ExtractSequences, ScanpathAndEquatorModes) {
  Rng rng(12);
  const ErpImage img = random_erp(64, 32, rng);
  std::vector<Scanpath> paths;
  for (ViewingCondition c : kAllConditions) {
    Scanpath sp;
    sp.condition = c;
    for (int t = 0; t < 300; ++t)
      sp.points.emplace_back(rng.uniform(-kPi, kPi), rng.uniform(-0.5, 0.5));
    paths.push_back(sp);
  }
  const auto seqs = extract_sequences(img, paths, {.K = 7, .fov = kPi / 2, .out_size = 8}, "img");
  ASSERT_EQ(seqs.size(), 4u);
  for (std::size_t m = 0; m < 4; ++m) {
    EXPECT_EQ(seqs[m].size(), 7u);
    EXPECT_EQ(seqs[m].condition, paths[m].condition);
    // time order preserved
    const auto idx = scanpath_indices(300, 7);
    for (std::size_t k = 0; k < 7; ++k)
      EXPECT_EQ(seqs[m].specs[k].center, paths[m].points[idx[k]]);
  }
  const auto eq = extract_equator_sequence(img, {.K = 7, .fov = kPi / 2, .out_size = 8});
  EXPECT_EQ(eq.size(), 7u);
  EXPECT_FALSE(eq.condition.has_value());

  std::vector<Scanpath> twins{paths[0], paths[0]};
  const auto t = extract_sequences(img, twins, {.K = 5, .fov = 1.0, .out_size = 8});
  for (std::size_t k = 0; k < 5; ++k) EXPECT_EQ(t[0].viewports[k], t[1].viewports[k]);
}

TEST(ImageIo, PngAndPpmRoundTrip) {
  const auto dir = std::filesystem::temp_directory_path() / "max360iq_imgio";
  std::filesystem::create_directories(dir);
  Rng rng(13);
  Tensor px = random_tensor({3, 5, 10}, rng, 0.0, 1.0);
  for (double& v : px.data()) v = std::round(v * 255.0) / 255.0;
  write_png(dir / "a.png", px);
  write_ppm(dir / "a.ppm", px);
  for (const char* name : {"a.png", "a.ppm"}) {
    const ErpImage back = read_image(dir / name);
    EXPECT_EQ(back.width(), 10u);
    EXPECT_EQ(back.height(), 5u);
    for (std::size_t i = 0; i < px.numel(); ++i) EXPECT_NEAR(back.pixels()[i], px[i], 1e-15);
  }
  EXPECT_THROW(read_image(dir / "missing.png"), DataError);
  write_file_atomic(dir / "junk.png", "not an image");
  EXPECT_THROW(read_image(dir / "junk.png"), DataError);
  std::filesystem::remove_all(dir);
}
