#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "lungcad/sampling.hpp"
#include "test_util.hpp"

namespace lungcad {
namespace {

TEST(NearNodule, ClosedForm) {
  EXPECT_EQ(near_nodule_probability(0), 0.0);
  EXPECT_NEAR(near_nodule_probability(1), 0.3, 1e-15);
  EXPECT_NEAR(near_nodule_probability(2), 0.51, 1e-15);
}

std::vector<NoduleAnnotation> nodules(std::size_t n) {
  std::vector<NoduleAnnotation> v;
  for (std::size_t i = 0; i < n; ++i) v.push_back({"p", {40.0 + 10.0 * double(i), 64, 64}, 6.0, {}});
  return v;
}

TEST(NearNodule, MonteCarloRateMatches) {
  const Geometry g{Shape3::cube(128)};
  for (std::size_t n : {0u, 1u, 2u, 5u}) {
    Rng r(100 + n);
    const auto ann = nodules(n);
    int near = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) near += plan_training_block(g, ann, r).near_nodule;
    EXPECT_NEAR(double(near) / draws, 1.0 - std::pow(0.7, double(n)), 0.01) << "N=" << n;
  }
}

TEST(TrainingBlocks, PlacementStaysInBoundsAndCoversNodule) {
  const Geometry g{Shape3{100, 90, 80}};
  const auto ann = nodules(1);
  Rng r(3);
  for (int i = 0; i < 2000; ++i) {
    const auto p = plan_training_block(g, ann, r);
    for (int a = 0; a < 3; ++a) {
      ASSERT_GE(p.offset[a], 0);
      ASSERT_LE(p.offset[a] + 64, g.shape[a]);
    }
    if (p.near_nodule) {
      const Vec3 c = g.world_to_voxel(ann[0].center_world);
      for (int a = 0; a < 3; ++a) {
        EXPECT_LE(double(p.offset[a]), c[a]);
        EXPECT_GE(double(p.offset[a] + 64), c[a]);
      }
    }
  }
}

TEST(TrainingBlocks, LabelMatchesRasterizedNodule) {
  CtVolume scan{Grid3(Shape3::cube(96), 0.0), true};
  const auto ann = nodules(1);
  Rng r(4);
  for (int i = 0; i < 20; ++i) {
    const auto b = sample_training_block(scan, ann, r);
    ASSERT_EQ(b.image.shape(), Shape3::cube(64));
    const VoxelMask expected = rasterize_annotation(ann[0], b.label.geometry());
    EXPECT_EQ(b.label.data(), expected.data());
  }
}

TEST(TrainingBlocks, SmallScanIsRejected) {
  CtVolume scan{Grid3(Shape3::cube(32), 0.0), true};
  Rng r(5);
  EXPECT_THROW(sample_training_block(scan, {}, r), Error);
}

TEST(TrainingBlocks, EpochOrderIsPermutation) {
  Rng r(6);
  auto order = epoch_patient_order(50, r);
  std::sort(order.begin(), order.end());
  for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(order[i], i);
}

TEST(WeightedCrossEntropy, PerfectPredictionIsNearZero) {
  Grid3 p(Shape3::cube(3), 0.0);
  VoxelMask l(Shape3::cube(3), 0);
  for (std::size_t i = 0; i < p.size(); i += 2) {
    p[i] = 1.0;
    l[i] = 1;
  }
  EXPECT_LT(weighted_cross_entropy(p, l).loss, 1e-5);
}

TEST(WeightedCrossEntropy, SingleVoxelByHand) {
  Grid3 p(Shape3::cube(1), 0.5);
  VoxelMask l(Shape3::cube(1), 1);
  EXPECT_NEAR(weighted_cross_entropy(p, l, 2.0).loss, 2.0 * std::log(2.0), 1e-12);
}

TEST(WeightedCrossEntropy, GradientMatchesFiniteDifferences) {
  Rng r(7);
  for (int trial = 0; trial < 5; ++trial) {
    Grid3 p(Shape3::cube(4));
    VoxelMask l(Shape3::cube(4));
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = r.uniform(0.05, 0.95);
      l[i] = r.bernoulli(0.3);
    }
    const auto g = weighted_cross_entropy(p, l).gradient;
    const double h = 1e-6;
    for (std::size_t i = 0; i < p.size(); ++i) {
      Grid3 a = p, b = p;
      a[i] += h;
      b[i] -= h;
      const double fd = (weighted_cross_entropy(a, l).loss - weighted_cross_entropy(b, l).loss) / (2 * h);
      EXPECT_LE(std::abs(fd - g[i]), 1e-6 * std::max(std::abs(fd), std::abs(g[i])));
    }
  }
}

TEST(WeightedCrossEntropy, ShapeMismatchIsRejected) {
  EXPECT_THROW(weighted_cross_entropy(Grid3(Shape3::cube(2)), VoxelMask(Shape3::cube(3))), Error);
}

}  // namespace
}  // namespace lungcad
