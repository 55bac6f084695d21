#include <gtest/gtest.h>

#include <cmath>

#include "lungcad/blob_scorer.hpp"
#include "lungcad/inference.hpp"
#include "lungcad/preprocess.hpp"
#include "test_util.hpp"

namespace lungcad {
namespace {

TEST(Tiling, SmallVolumeIsOneBlock) {
  const auto b = split_blocks(Shape3::cube(64), TilingConfig{Shape3::cube(64), 8});
  ASSERT_EQ(b.size(), 1u);
  EXPECT_EQ(b[0].offset, (Index3{0, 0, 0}));
  EXPECT_EQ(b[0].extent, Shape3::cube(64));
}

TEST(Tiling, TypicalChestScanIsEightBlocks) {
  EXPECT_EQ(split_blocks(Shape3::cube(448), TilingConfig{}).size(), 8u);
}

TEST(Tiling, InteriorsPartitionVolumeAndBlocksFit) {
  for (std::int64_t n : {65, 100, 127, 200, 333}) {
    const Shape3 shape{n, n / 2 + 40, 70};
    const TilingConfig cfg{Shape3{48, 48, 64}, 12};
    const auto blocks = split_blocks(shape, cfg);
    VoxelMask cover(shape, 0);
    for (const auto& b : blocks) {
      for (int a = 0; a < 3; ++a) {
        ASSERT_GE(b.offset[a], 0);
        ASSERT_LE(b.offset[a] + b.extent[a], shape[a]);
        ASSERT_LE(b.offset[a], b.interior_lo[a]);
        ASSERT_GE(b.offset[a] + b.extent[a], b.interior_hi[a]);
        // Interior edges inside the volume have at least one margin of context.
        if (b.interior_lo[a] > 0) ASSERT_GE(b.interior_lo[a] - b.offset[a], cfg.margin);
        if (b.interior_hi[a] < shape[a]) ASSERT_GE(b.offset[a] + b.extent[a] - b.interior_hi[a], cfg.margin);
      }
      for (auto z = b.interior_lo.z; z < b.interior_hi.z; ++z)
        for (auto y = b.interior_lo.y; y < b.interior_hi.y; ++y)
          for (auto x = b.interior_lo.x; x < b.interior_hi.x; ++x) ++cover(x, y, z);
    }
    for (auto c : cover.data()) ASSERT_EQ(c, 1);
  }
}

TEST(Tiling, InvalidConfig) {
  EXPECT_THROW(split_blocks(Shape3::cube(64), TilingConfig{Shape3::cube(16), 8}), Error);
  EXPECT_THROW(split_blocks(Shape3::cube(64), TilingConfig{Shape3::cube(16), -1}), Error);
}

TEST(Stitch, SingleBlockIsExact) {
  Rng r(1);
  const Grid3 g = testing::random_grid(Shape3::cube(10), r);
  const TilingConfig cfg{Shape3::cube(16), 4};
  const auto blocks = split_blocks(g.shape(), cfg);
  EXPECT_EQ(stitch({g}, blocks, g.geometry(), cfg), g);
}

TEST(Stitch, InteriorWeightIsOne) {
  const Shape3 shape = Shape3::cube(100);
  const TilingConfig cfg{Shape3::cube(48), 12};
  for (const auto& b : split_blocks(shape, cfg)) {
    const Index3 mid{b.extent.nx / 2, b.extent.ny / 2, b.extent.nz / 2};
    EXPECT_EQ(stitch_weight(b, mid, shape, cfg.margin), 1.0);
    EXPECT_EQ(stitch_weight(b, mid, shape, cfg.margin, 8), 1.0);
  }
}

TEST(Stitch, FieldOfViewBandHasZeroWeight) {
  const Shape3 shape{100, 40, 40};
  const TilingConfig cfg{Shape3{48, 48, 48}, 12};
  const auto blocks = split_blocks(shape, cfg);
  ASSERT_GT(blocks.size(), 1u);
  const auto& b = blocks[1];
  ASSERT_GT(b.offset.x, 0);
  EXPECT_EQ(stitch_weight(b, {5, 20, 20}, shape, cfg.margin, 6), 0.0);
  EXPECT_GT(stitch_weight(b, {6, 20, 20}, shape, cfg.margin, 6), 0.0);
}

TEST(ScoreVolume, ConstantZeroScorer) {
  CtVolume v{Grid3(Shape3::cube(40), 1.0), true};
  const auto pm = score_volume(v, ConstantScorer(0.0), TilingConfig{Shape3::cube(24), 4});
  for (double p : pm.data()) EXPECT_EQ(p, 0.0);
}

TEST(ScoreVolume, FieldOfViewBeyondMarginIsRejected) {
  CtVolume v{Grid3(Shape3::cube(60), 1.0), true};
  EXPECT_THROW(score_volume(v, BlobScorer({}), TilingConfig{Shape3::cube(32), 8}), Error);
  // A single block needs no margin.
  EXPECT_NO_THROW(score_volume(v, BlobScorer({}), TilingConfig{Shape3::cube(64), 8}));
}

Grid3 sphere_volume(Shape3 shape, const std::vector<std::pair<Vec3, double>>& spheres, double bright = 10.0) {
  Grid3 g(shape, 0.0);
  for (std::int64_t z = 0; z < shape.nz; ++z)
    for (std::int64_t y = 0; y < shape.ny; ++y)
      for (std::int64_t x = 0; x < shape.nx; ++x)
        for (const auto& [c, d] : spheres)
          if (distance(g.geometry().voxel_to_world(Index3{x, y, z}), c) < d / 2) g(x, y, z) = bright;
  return g;
}

TEST(StitchEquivalence, BlobScorerMatchesSinglePass) {
  Rng r(2);
  Grid3 g = sphere_volume(Shape3{70, 60, 50}, {{{20, 20, 20}, 9}, {{45, 35, 30}, 14}});
  for (double& v : g.data()) v += r.normal(0, 1);
  const CtVolume vol{g, true};
  const BlobScorer scorer({});
  const ProbMap single = scorer.score(g);
  const ProbMap tiled = score_volume(vol, scorer, TilingConfig{Shape3::cube(40), 16}, 2);
  ASSERT_GT(split_blocks(g.shape(), TilingConfig{Shape3::cube(40), 16}).size(), 1u);
  double worst = 0;
  for (std::size_t i = 0; i < g.size(); ++i) worst = std::max(worst, std::abs(single[i] - tiled[i]));
  EXPECT_LT(worst, 1e-9);
}

TEST(BlobScorer, HomogeneousVolumeScoresBelowHalf) {
  BlobScorerParams p;
  const BlobScorer s(p);
  const ProbMap pm = s.score(Grid3(Shape3::cube(24), 3.0));
  for (double v : pm.data()) EXPECT_NEAR(v, logistic(-p.steepness * p.threshold), 1e-9);
  EXPECT_LT(logistic(-p.steepness * p.threshold), 0.5);
}

TEST(BlobScorer, ContrastMatchesDirectSum) {
  Rng r(3);
  BlobScorerParams p;
  p.radii_mm = {2.0};
  const BlobScorer s(p);
  const Grid3 g = testing::random_grid(Shape3::cube(12), r);
  const Grid3 c = s.contrast(g);
  const Index3 v{6, 5, 7};
  double in = 0, shell = 0;
  int n_in = 0, n_shell = 0;
  for (std::int64_t z = -4; z <= 4; ++z)
    for (std::int64_t y = -4; y <= 4; ++y)
      for (std::int64_t x = -4; x <= 4; ++x) {
        const double d = std::sqrt(double(x * x + y * y + z * z));
        const double val = g(v.x + x, v.y + y, v.z + z);
        if (d <= 2.0) {
          in += val;
          ++n_in;
        } else if (d <= 4.0) {
          shell += val;
          ++n_shell;
        }
      }
  EXPECT_NEAR(c(v.x, v.y, v.z), in / n_in - shell / n_shell, 1e-9);
}

TEST(BlobScorer, BrightSphereArgmaxIsItsCenter) {
  const Vec3 center{17, 15, 16};
  const Grid3 g = sphere_volume(Shape3::cube(34), {{center, 8}});
  const ProbMap pm = BlobScorer({}).score(g);
  std::size_t best = 0;
  for (std::size_t i = 0; i < pm.size(); ++i)
    if (pm[i] > pm[best]) best = i;
  const Index3 b = pm.unravel(best);
  EXPECT_LE(distance(pm.geometry().voxel_to_world(b), center), std::sqrt(3.0) + 1e-9);
}

TEST(BlobScorer, TwoDisjointSpheresBothDetected) {
  const Grid3 g = sphere_volume(Shape3{60, 40, 40}, {{{15, 20, 20}, 6}, {{42, 20, 20}, 12}});
  const ProbMap pm = BlobScorer({}).score(g);
  EXPECT_GT(pm(15, 20, 20), 0.5);
  EXPECT_GT(pm(42, 20, 20), 0.5);
  EXPECT_LT(pm(30, 5, 5), 0.5);
}

TEST(BlobScorer, FieldOfViewFromLargestRadius) {
  const BlobScorer s({});
  EXPECT_EQ(s.fov_radius({1, 1, 1}), 16);
  EXPECT_EQ(s.fov_radius({2, 2, 2}), 8);
  BlobScorerParams bad;
  bad.radii_mm = {};
  EXPECT_THROW(bad.validate(), Error);
}

TEST(Downsample, ShapeAndConstant) {
  CtVolume v{Grid3(Shape3::cube(64), 0.25), true};
  const auto d = downsample_pass(v);
  EXPECT_EQ(d.image.shape(), Shape3::cube(32));
  EXPECT_EQ(d.geometry().spacing, (Vec3{2, 2, 2}));
  for (double x : d.image.data()) EXPECT_NEAR(x, 0.25, 1e-12);
  EXPECT_EQ(resolution_of(d.geometry()), Resolution::k2mm);
  EXPECT_EQ(resolution_of(v.geometry()), Resolution::k1mm);
}

TEST(Resolution, StringRoundTrip) {
  for (auto r : {Resolution::k1mm, Resolution::k2mm}) EXPECT_EQ(resolution_from_string(to_string(r)), r);
  EXPECT_THROW(resolution_from_string("3mm"), Error);
}

}  // namespace
}  // namespace lungcad
