#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "lungcad/candidates.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace lungcad {
namespace {

TEST(Threshold, Examples) {
  ProbMap pm(Shape3{2, 1, 1});
  pm[0] = 0.19;
  pm[1] = 0.21;
  const auto m = threshold(pm, 0.2);
  EXPECT_EQ(m[0], 0);
  EXPECT_EQ(m[1], 1);
  ProbMap pos(Shape3::cube(3), 0.3);
  const auto all = threshold(pos, 0.0);
  for (auto v : all.data()) EXPECT_EQ(v, 1);
  pos[4] = 1.0;
  const auto none = threshold(pos, 1.0);
  for (auto v : none.data()) EXPECT_EQ(v, 0);
}

TEST(Opening, IsolatedVoxelRemovedCrossKept) {
  VoxelMask m(Shape3::cube(7), 0);
  m(3, 3, 3) = 1;
  EXPECT_EQ(count_nonzero(binary_opening(m)), 0u);
  VoxelMask c(Shape3::cube(7), 0);
  for (int z = 2; z < 5; ++z)
    for (int y = 2; y < 5; ++y)
      for (int x = 2; x < 5; ++x) c(x, y, z) = 1;
  // A 3x3x3 cube opens to the 6-neighbour cross, which is itself open.
  VoxelMask cross(Shape3::cube(7), 0);
  cross(3, 3, 3) = cross(2, 3, 3) = cross(4, 3, 3) = cross(3, 2, 3) = cross(3, 4, 3) = cross(3, 3, 2) = cross(3, 3, 4) = 1;
  EXPECT_EQ(binary_opening(c), cross);
  EXPECT_EQ(binary_opening(cross), cross);
}

VoxelMask random_mask(Rng& r, double p, Shape3 s = Shape3::cube(8)) {
  VoxelMask m(s);
  for (auto& v : m.data()) v = r.bernoulli(p);
  return m;
}

TEST(Opening, MatchesBruteForce) {
  Rng r(1);
  for (int i = 0; i < 200; ++i) {
    const auto m = random_mask(r, r.uniform(0.2, 0.9));
    EXPECT_EQ(binary_erosion(m), testing::brute_erode(m));
    EXPECT_EQ(binary_dilation(m), testing::brute_dilate(m));
    EXPECT_EQ(binary_opening(m), testing::brute_open(m));
  }
}

TEST(Components, FaceVersusEdgeAdjacency) {
  VoxelMask a(Shape3::cube(3), 0);
  a(0, 0, 0) = a(1, 0, 0) = 1;
  EXPECT_EQ(connected_components(a).count, 1);
  VoxelMask b(Shape3::cube(3), 0);
  b(0, 0, 0) = b(1, 1, 0) = 1;
  EXPECT_EQ(connected_components(b).count, 2);
}

TEST(Components, MatchesFloodFill) {
  Rng r(2);
  for (int i = 0; i < 200; ++i) {
    const auto m = random_mask(r, r.uniform(0.1, 0.6));
    std::int32_t n = 0;
    const auto ref = testing::brute_components(m, n);
    const auto got = connected_components(m);
    ASSERT_EQ(got.count, n);
    EXPECT_TRUE(testing::same_partition(got.labels, ref));
  }
}

TEST(Extract, EmptyMapYieldsNothing) { EXPECT_TRUE(extract_candidates(ProbMap(Shape3::cube(8), 0.0), 0.5).empty()); }

ProbMap sphere_map(Shape3 s, Vec3 c, double d, double value) {
  ProbMap pm(s, 0.0);
  for (std::size_t i = 0; i < pm.size(); ++i)
    if (distance(pm.geometry().voxel_to_world(pm.unravel(i)), c) < d / 2) pm[i] = value;
  return pm;
}

TEST(Extract, UniformSphereCentroid) {
  const Vec3 c{10, 11, 12};
  const auto pm = sphere_map(Shape3::cube(24), c, 7, 0.8);
  const auto cands = extract_candidates(pm, 0.5, "p");
  ASSERT_EQ(cands.size(), 1u);
  EXPECT_LT(distance(cands[0].center_world, c), 1e-9);
  EXPECT_EQ(cands[0].patient_id, "p");
  EXPECT_NEAR(cands[0].mean_score, 0.8, 1e-12);
  EXPECT_NEAR(cands[0].max_score, 0.8, 1e-12);
  EXPECT_NEAR(cands[0].equivalent_diameter_mm, equivalent_diameter(double(cands[0].voxel_count)), 1e-12);
}

TEST(Extract, GradientSphereCentroidIsWeightedMean) {
  const Vec3 c{10.3, 11.6, 12.2};
  ProbMap pm = sphere_map(Shape3::cube(24), c, 8, 1.0);
  Vec3 num{};
  double den = 0;
  for (std::size_t i = 0; i < pm.size(); ++i) {
    if (pm[i] == 0) continue;
    const Vec3 w = pm.geometry().voxel_to_world(pm.unravel(i));
    pm[i] = 0.6 + 0.01 * w.x;
  }
  const auto kept = binary_opening(threshold(pm, 0.5));
  for (std::size_t i = 0; i < pm.size(); ++i) {
    if (!kept[i]) continue;
    num = num + pm.geometry().voxel_to_world(pm.unravel(i)) * pm[i];
    den += pm[i];
  }
  const auto cands = extract_candidates(pm, 0.5);
  ASSERT_EQ(cands.size(), 1u);
  EXPECT_LT(distance(cands[0].center_world, num * (1.0 / den)), 1e-9);
}

TEST(Extract, EquivalentDiameter) {
  EXPECT_NEAR(equivalent_diameter(std::numbers::pi / 6.0 * 1000.0), 10.0, 1e-12);
}

TEST(HitTest, BoundaryIsStrict) {
  const NoduleAnnotation a{"p", {0, 0, 0}, 6.0, {}};
  EXPECT_TRUE(hit_test(Vec3{0, 0, 0}, a));
  EXPECT_FALSE(hit_test(Vec3{3, 0, 0}, a));
  EXPECT_TRUE(hit_test(Vec3{2.999, 0, 0}, a));
}

TEST(HitTest, RandomPairsMatchDistance) {
  Rng r(3);
  for (int i = 0; i < 1000; ++i) {
    const NoduleAnnotation a{"p", {r.uniform(-10, 10), r.uniform(-10, 10), r.uniform(-10, 10)}, r.uniform(1, 20), {}};
    const Vec3 p{r.uniform(-20, 20), r.uniform(-20, 20), r.uniform(-20, 20)};
    EXPECT_EQ(hit_test(p, a), distance(p, a.center_world) < a.diameter_mm / 2);
  }
}

TEST(SegmentationMetrics, Examples) {
  VoxelMask p(Shape3{16, 1, 1}, 0);
  VoxelMask g16(Shape3{16, 1, 1}, 0);
  for (int i = 0; i < 8; ++i) g16[i] = 1;
  p[6] = p[7] = p[8] = p[9] = 1;
  const auto m = segmentation_metrics(p, g16);
  EXPECT_NEAR(m.precision, 0.5, 1e-15);
  EXPECT_NEAR(m.recall, 0.25, 1e-15);
  EXPECT_NEAR(m.dice, 1.0 / 3.0, 1e-15);
  const auto same = segmentation_metrics(g16, g16);
  EXPECT_EQ(same.dice, 1.0);
  EXPECT_EQ(same.precision, 1.0);
  EXPECT_EQ(same.recall, 1.0);
  VoxelMask other(Shape3{16, 1, 1}, 0);
  other[15] = 1;
  const auto dis = segmentation_metrics(other, g16);
  EXPECT_EQ(dis.dice, 0.0);
  EXPECT_EQ(dis.precision, 0.0);
  EXPECT_EQ(dis.recall, 0.0);
}

TEST(CandidatesCsv, RoundTrip) {
  testing::TempDir dir("cands");
  const auto pm = sphere_map(Shape3::cube(20), {7.3, 8.1, 9.9}, 6, 0.7);
  auto cands = extract_candidates(pm, 0.5, "P1");
  cands.push_back(cands[0]);
  cands[1].resolution = Resolution::k2mm;
  save_candidates_csv(dir / "c.csv", cands);
  const auto back = load_candidates_csv(dir / "c.csv");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].patient_id, cands[i].patient_id);
    EXPECT_EQ(back[i].center_world, cands[i].center_world);
    EXPECT_EQ(back[i].voxel_count, cands[i].voxel_count);
    EXPECT_EQ(back[i].equivalent_diameter_mm, cands[i].equivalent_diameter_mm);
    EXPECT_EQ(back[i].max_score, cands[i].max_score);
    EXPECT_EQ(back[i].resolution, cands[i].resolution);
  }
}

TEST(CandidatesCsv, RejectsBadInput) {
  testing::TempDir dir("cands_bad");
  testing::write_text(dir / "a.csv", "patient_id,x_mm\nP,1\n");
  EXPECT_THROW(load_candidates_csv(dir / "a.csv"), Error);
  testing::write_text(dir / "b.csv",
                      "patient_id,x_mm,y_mm,z_mm,voxels,diameter_mm,mean_score,max_score,resolution\n"
                      "P,0,0,0,5,2,0.9,0.5,1mm\n");
  EXPECT_THROW(load_candidates_csv(dir / "b.csv"), Error);
}

}  // namespace
}  // namespace lungcad
