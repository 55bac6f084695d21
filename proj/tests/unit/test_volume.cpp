#include <gtest/gtest.h>

#include <cmath>

#include "lungcad/annotations.hpp"
#include "lungcad/metaimage.hpp"
#include "lungcad/preprocess.hpp"
#include "lungcad/rng.hpp"
#include "lungcad/volume.hpp"
#include "test_util.hpp"

namespace lungcad {
namespace {

using testing::TempDir;
using testing::write_text;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next_u64();
    EXPECT_EQ(va, b.next_u64());
    EXPECT_NE(va, c.next_u64());
  }
}

TEST(Rng, DerivedStreamsDiffer) {
  EXPECT_NE(derive_seed(1, "a"), derive_seed(1, "b"));
  EXPECT_NE(derive_seed(1, std::uint64_t{0}), derive_seed(1, std::uint64_t{1}));
  EXPECT_EQ(derive_seed(7, "split"), derive_seed(7, "split"));
}

TEST(Rng, UniformIntIsInclusive) {
  Rng r(3);
  bool lo = false, hi = false;
  for (int i = 0; i < 1000; ++i) {
    const auto v = r.uniform_int(0, 2);
    ASSERT_GE(v, 0);
    ASSERT_LE(v, 2);
    lo |= v == 0;
    hi |= v == 2;
  }
  EXPECT_TRUE(lo && hi);
}

TEST(Geometry, UnitGeometry) {
  Geometry g{Shape3::cube(10)};
  const Vec3 v = g.world_to_voxel({5, 6, 7});
  EXPECT_EQ(v, (Vec3{5, 6, 7}));
}

TEST(Geometry, AffineByHand) {
  Geometry g{Shape3::cube(10), {2, 2, 2}, {-100, -100, -100}};
  const Vec3 v = g.world_to_voxel({-100, -98, -96});
  EXPECT_DOUBLE_EQ(v.x, 0);
  EXPECT_DOUBLE_EQ(v.y, 1);
  EXPECT_DOUBLE_EQ(v.z, 2);
}

TEST(Geometry, RoundTripRandomPoints) {
  Geometry g{Shape3::cube(10), {0.7, 0.7, 2.5}, {-123.4, 56.7, -8.9}};
  Rng r(11);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const Vec3 p{r.uniform(-500, 500), r.uniform(-500, 500), r.uniform(-500, 500)};
    worst = std::max(worst, distance(p, g.voxel_to_world(g.world_to_voxel(p))));
  }
  EXPECT_LT(worst, 1e-9);
}

TEST(Geometry, RejectsNonPositiveSpacing) {
  Geometry g{Shape3::cube(4), {1, 0, 1}};
  EXPECT_THROW(g.validate(), Error);
}

std::size_t brute_sphere_count(const Geometry& g, Vec3 c, double d, bool inclusive = false) {
  std::size_t n = 0;
  for (std::int64_t z = 0; z < g.shape.nz; ++z)
    for (std::int64_t y = 0; y < g.shape.ny; ++y)
      for (std::int64_t x = 0; x < g.shape.nx; ++x) {
        const double r = distance(g.voxel_to_world(Index3{x, y, z}), c);
        n += inclusive ? r <= d / 2 : r < d / 2;
      }
  return n;
}

TEST(Rasterize, SubVoxelSphereIsOneVoxel) {
  NoduleAnnotation a{"p", {5, 5, 5}, 1.0, {}};
  EXPECT_EQ(count_nonzero(rasterize_annotation(a, Geometry{Shape3::cube(11)})), 1u);
}

TEST(Rasterize, TenMillimeterSphereMatchesExhaustiveScan) {
  const Geometry g{Shape3::cube(21)};
  NoduleAnnotation a{"p", {10, 10, 10}, 10.0, {}};
  const auto n = count_nonzero(rasterize_annotation(a, g));
  EXPECT_EQ(n, brute_sphere_count(g, a.center_world, 10.0));
  // 30 lattice points sit exactly on the 5 mm shell and are excluded.
  EXPECT_EQ(n, 485u);
  EXPECT_EQ(brute_sphere_count(g, a.center_world, 10.0, true), 515u);
}

TEST(Rasterize, TranslationByWholeVoxelsKeepsCount) {
  const Geometry g{Shape3::cube(40)};
  NoduleAnnotation a{"p", {10, 10, 10}, 10.0, {}};
  NoduleAnnotation b{"p", {27, 22, 13}, 10.0, {}};
  EXPECT_EQ(count_nonzero(rasterize_annotation(a, g)), count_nonzero(rasterize_annotation(b, g)));
}

TEST(Crop, PaddedCropFillsOutside) {
  Grid3 g(Shape3::cube(4), 1.0);
  const Grid3 c = crop_padded(g, Index3{-2, 0, 0}, Shape3::cube(4), -5.0);
  EXPECT_EQ(c(0, 0, 0), -5.0);
  EXPECT_EQ(c(2, 0, 0), 1.0);
  EXPECT_DOUBLE_EQ(c.geometry().origin.x, -2.0);
  EXPECT_THROW(crop(g, Index3{1, 1, 1}, Shape3::cube(4)), Error);
}

TEST(MetaImage, ConstantVolumeRoundTrip) {
  TempDir dir("mhd_const");
  Grid3 g(Shape3::cube(4), 100.0);
  save_metaimage(dir / "c.mhd", g, ElementType::kShort);
  const CtVolume v = load_metaimage(dir / "c.mhd");
  EXPECT_EQ(v.image.size(), 64u);
  for (double x : v.image.data()) EXPECT_EQ(x, 100.0);
}

TEST(MetaImage, HeaderSpacingPassThrough) {
  TempDir dir("mhd_hdr");
  write_text(dir / "h.mhd",
             "ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\nElementSpacing = 0.7 0.7 2.5\n"
             "ElementType = MET_SHORT\nElementDataFile = h.raw\n");
  write_text(dir / "h.raw", std::string(16, '\0'));
  const Grid3 g = read_metaimage(dir / "h.mhd");
  EXPECT_DOUBLE_EQ(g.geometry().spacing.x, 0.7);
  EXPECT_DOUBLE_EQ(g.geometry().spacing.y, 0.7);
  EXPECT_DOUBLE_EQ(g.geometry().spacing.z, 2.5);
}

TEST(MetaImage, RandomFloatVolumeIsBitIdentical) {
  TempDir dir("mhd_rand");
  Rng r(5);
  Grid3 g(Geometry{Shape3::cube(8), {0.5, 0.75, 1.25}, {-3, 4, 5}});
  for (double& v : g.data()) v = static_cast<float>(r.uniform(-1000, 1000));
  save_metaimage(dir / "r.mhd", g, ElementType::kFloat);
  ElementType t{};
  const Grid3 back = read_metaimage(dir / "r.mhd", &t);
  EXPECT_EQ(t, ElementType::kFloat);
  EXPECT_EQ(back, g);
}

TEST(MetaImage, IngestionClampsToTwelveBitRange) {
  TempDir dir("mhd_clamp");
  Grid3 g(Shape3{2, 1, 1});
  g[0] = -3000;
  g[1] = 5000;
  save_metaimage(dir / "x.mhd", g, ElementType::kShort);
  const CtVolume v = load_metaimage(dir / "x.mhd");
  EXPECT_EQ(v.image[0], kRawHuMin);
  EXPECT_EQ(v.image[1], kRawHuMax);
}

TEST(MetaImage, Errors) {
  TempDir dir("mhd_err");
  EXPECT_THROW(read_metaimage(dir / "missing.mhd"), Error);
  write_text(dir / "z.mhd",
             "NDims = 3\nDimSize = 2 2 2\nElementType = MET_SHORT\nElementDataFile = z.zraw\n");
  try {
    read_metaimage(dir / "z.mhd");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kFormat);
  }
  write_text(dir / "u.mhd", "NDims = 3\nDimSize = 2 2 2\nElementType = MET_UCHAR\nElementDataFile = u.raw\n");
  try {
    read_metaimage(dir / "u.mhd");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kUnsupportedFormat);
  }
  write_text(dir / "t.mhd", "NDims = 3\nDimSize = 2 2 2\nElementType = MET_SHORT\nElementDataFile = t.raw\n");
  write_text(dir / "t.raw", std::string(3, '\0'));
  EXPECT_THROW(read_metaimage(dir / "t.mhd"), Error);
}

TEST(Annotations, DirectFieldMapping) {
  TempDir dir("ann");
  write_text(dir / "a.csv", "seriesuid,coordX,coordY,coordZ,diameter_mm\np1,10.0,-20.0,30.0,6.5\n");
  const auto a = load_annotations_csv(dir / "a.csv");
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].patient_id, "p1");
  EXPECT_EQ(a[0].center_world, (Vec3{10, -20, 30}));
  EXPECT_EQ(a[0].diameter_mm, 6.5);
  EXPECT_TRUE(a[0].radiologist_scores.empty());
}

TEST(Annotations, BlankScoreColumnsAreSkipped) {
  TempDir dir("ann_scores");
  write_text(dir / "a.csv",
             "seriesuid,coordX,coordY,coordZ,diameter_mm,score1,score2,score3,score4\np1,0,0,0,5,4,4,5,\n");
  const auto a = load_annotations_csv(dir / "a.csv");
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a[0].radiologist_scores, (std::vector<int>{4, 4, 5}));
}

TEST(Annotations, HeaderOnlyIsEmptyAndRoundTrips) {
  TempDir dir("ann_rt");
  write_text(dir / "a.csv", "seriesuid,coordX,coordY,coordZ,diameter_mm\n");
  EXPECT_TRUE(load_annotations_csv(dir / "a.csv").empty());
  std::vector<NoduleAnnotation> v = {{"p1", {1.5, 2, 3}, 7.25, {1, 5, 3}}, {"p2", {0, 0, 0}, 3, {}}};
  save_annotations_csv(dir / "b.csv", v);
  const auto back = load_annotations_csv(dir / "b.csv");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].center_world, v[0].center_world);
  EXPECT_EQ(back[0].radiologist_scores, v[0].radiologist_scores);
  EXPECT_EQ(back[1].diameter_mm, 3);
}

TEST(Annotations, BadRowsAreParseErrors) {
  TempDir dir("ann_bad");
  write_text(dir / "a.csv", "seriesuid,coordX,coordY,coordZ,diameter_mm\np1,abc,0,0,5\n");
  EXPECT_THROW(load_annotations_csv(dir / "a.csv"), Error);
  write_text(dir / "b.csv", "seriesuid,coordX,coordY,coordZ,diameter_mm\np1,0,0,0,-5\n");
  EXPECT_THROW(load_annotations_csv(dir / "b.csv"), Error);
}

CtVolume volume_of(std::vector<double> values, Shape3 shape, Vec3 spacing = {1, 1, 1}) {
  return {Grid3(Geometry{shape, spacing}, std::move(values)), false};
}

TEST(Preprocess, ClipBounds) {
  const auto v = clip_hu(volume_of({-2000, 400, 250, 1000}, {4, 1, 1}));
  EXPECT_EQ(v.image[0], -1000);
  EXPECT_EQ(v.image[1], 400);
  EXPECT_EQ(v.image[2], 250);
  EXPECT_EQ(v.image[3], 400);
}

TEST(Preprocess, ClipIsIdempotent) {
  Rng r(9);
  CtVolume v{testing::random_grid(Shape3::cube(6), r, -3000, 3000), false};
  const auto once = clip_hu(v);
  EXPECT_EQ(clip_hu(once).image, once.image);
}

TEST(Preprocess, IdentityResample) {
  Rng r(1);
  CtVolume v{testing::random_grid(Shape3::cube(5), r), false};
  const auto out = resample(v, {1, 1, 1});
  ASSERT_EQ(out.image.shape(), v.image.shape());
  for (std::size_t i = 0; i < v.image.size(); ++i) EXPECT_NEAR(out.image[i], v.image[i], 1e-12);
}

TEST(Preprocess, ConstantResamplesToConstant) {
  CtVolume v{Grid3(Geometry{Shape3{7, 5, 3}, {0.7, 0.9, 2.5}}, -321.0), false};
  const auto out = resample(v, {1, 1, 1});
  for (double x : out.image.data()) EXPECT_NEAR(x, -321.0, 1e-12);
}

TEST(Preprocess, RampDownsampleMatchesAnalytic) {
  Grid3 g(Shape3{16, 4, 4});
  for (std::int64_t z = 0; z < 4; ++z)
    for (std::int64_t y = 0; y < 4; ++y)
      for (std::int64_t x = 0; x < 16; ++x) g(x, y, z) = static_cast<double>(x);
  const auto out = resample({g, false}, {2, 1, 1});
  ASSERT_EQ(out.image.nx(), 8);
  for (std::int64_t x = 0; x < 8; ++x) EXPECT_NEAR(out.image(x, 1, 1), 2.0 * x, 1e-9);
}

TEST(Preprocess, NormalizeFixedPointAndShift) {
  const auto a = normalize(volume_of({-1, 1, -1, 1}, {4, 1, 1}));
  EXPECT_NEAR(a.image[0], -1, 1e-12);
  EXPECT_NEAR(a.image[1], 1, 1e-12);
  const auto b = normalize(volume_of({0, 2}, {2, 1, 1}));
  EXPECT_NEAR(b.image[0], -1, 1e-12);
  EXPECT_NEAR(b.image[1], 1, 1e-12);
  EXPECT_TRUE(b.normalized);
}

TEST(Preprocess, NormalizeRandomHasUnitMoments) {
  Rng r(2);
  CtVolume v{testing::random_grid(Shape3::cube(9), r, -900, 300), false};
  const auto n = normalize(v);
  double m = 0, s = 0;
  for (double x : n.image.data()) m += x;
  m /= static_cast<double>(n.image.size());
  for (double x : n.image.data()) s += (x - m) * (x - m);
  s /= static_cast<double>(n.image.size());
  EXPECT_LT(std::abs(m), 1e-9);
  EXPECT_LT(std::abs(s - 1), 1e-9);
}

TEST(Preprocess, NormalizeConstantIsDegenerate) {
  try {
    normalize(volume_of({3, 3}, {2, 1, 1}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDegenerateInput);
  }
}

TEST(Preprocess, PipelineProducesUnitSpacing) {
  CtVolume v{Grid3(Geometry{Shape3{10, 10, 4}, {0.7, 0.7, 2.5}}), false};
  Rng r(4);
  for (double& x : v.image.data()) x = r.uniform(-1000, 400);
  const auto out = preprocess(v);
  EXPECT_EQ(out.geometry().spacing, (Vec3{1, 1, 1}));
  EXPECT_EQ(out.image.shape(), (Shape3{7, 7, 10}));
  EXPECT_TRUE(out.normalized);
}

}  // namespace
}  // namespace lungcad
