#pragma once

#include <string>
#include <vector>

#include "lungcad/rng.hpp"
#include "lungcad/volume.hpp"

namespace lungcad {

struct BlockSamplingConfig {
  Shape3 block_shape = Shape3::cube(64);
  std::int64_t jitter_voxels = 16;  // uniform center jitter per axis for near-nodule blocks
  double base = 0.7;                // random-block probability is base^N
};

// P(near-nodule block) = 1 - base^N.
double near_nodule_probability(std::size_t nodule_count, double base = 0.7);

struct BlockPlacement {
  Index3 offset;
  bool near_nodule = false;
};

// Chooses where a training block goes without touching voxel data. The
// block always lies fully inside `geometry`.
BlockPlacement plan_training_block(const Geometry& geometry, const std::vector<NoduleAnnotation>& annotations,
                                   Rng& rng, const BlockSamplingConfig& cfg = {});

struct TrainingBlock {
  Grid3 image;
  VoxelMask label;
  std::string patient_id;
  bool sampled_near_nodule = false;
};

TrainingBlock sample_training_block(const CtVolume& scan, const std::vector<NoduleAnnotation>& annotations,
                                    Rng& rng, const BlockSamplingConfig& cfg = {});

// One block per patient per epoch: a seeded permutation of patient indices.
std::vector<std::size_t> epoch_patient_order(std::size_t patient_count, Rng& rng);

struct WeightedLoss {
  double loss = 0.0;
  Grid3 gradient;  // d loss / d pred, same shape as pred
};

inline constexpr double kProbabilityClamp = 1e-7;

// Mean voxelwise binary cross-entropy; nodule voxels (label 1) carry
// `nodule_weight`.
WeightedLoss weighted_cross_entropy(const Grid3& pred, const VoxelMask& label, double nodule_weight = 2.0);

}  // namespace lungcad
