#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "lungcad/inference.hpp"
#include "lungcad/volume.hpp"

namespace lungcad {

struct Candidate {
  std::string patient_id;
  // Continuous voxel coordinates in the map the candidate came from. NaN
  // when loaded from CSV.
  Vec3 center_voxel;
  Vec3 center_world;
  std::size_t voxel_count = 0;
  double volume_mm3 = 0.0;
  double equivalent_diameter_mm = 0.0;
  double mean_score = 0.0;
  double max_score = 0.0;
  Resolution resolution = Resolution::k1mm;
};

double equivalent_diameter(double volume_mm3);

// pm > t, strict.
VoxelMask threshold(const ProbMap& pm, double t);

// 6-neighborhood (plus center) structuring element; voxels outside the
// volume are background.
VoxelMask binary_erosion(const VoxelMask& mask);
VoxelMask binary_dilation(const VoxelMask& mask);
VoxelMask binary_opening(const VoxelMask& mask);

struct Labeling {
  Image3<std::int32_t> labels;  // 0 = background, 1..count
  std::int32_t count = 0;
};

// Face-adjacency components labeled in order of first raster visit.
Labeling connected_components(const VoxelMask& mask);

// threshold -> opening -> components, with score-weighted centroids.
std::vector<Candidate> extract_candidates(const ProbMap& pm, double t, const std::string& patient_id = {});

// Candidate center strictly within the annotation radius.
bool hit_test(const Candidate& c, const NoduleAnnotation& a);
bool hit_test(Vec3 center_world, const NoduleAnnotation& a);

struct SegmentationMetrics {
  double dice = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

SegmentationMetrics segmentation_metrics(const VoxelMask& pred, const VoxelMask& gt);

// `patient_id,x_mm,y_mm,z_mm,voxels,diameter_mm,mean_score,max_score,resolution`
void save_candidates_csv(const std::filesystem::path& path, const std::vector<Candidate>& candidates);
std::vector<Candidate> load_candidates_csv(const std::filesystem::path& path);

}  // namespace lungcad
