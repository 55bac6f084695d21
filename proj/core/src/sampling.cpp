#include "lungcad/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lungcad {

double near_nodule_probability(std::size_t nodule_count, double base) {
  return 1.0 - std::pow(base, static_cast<double>(nodule_count));
}

BlockPlacement plan_training_block(const Geometry& geometry, const std::vector<NoduleAnnotation>& annotations,
                                   Rng& rng, const BlockSamplingConfig& cfg) {
  for (int a = 0; a < 3; ++a) {
    require(geometry.shape[a] >= cfg.block_shape[a], ErrorKind::kValidation,
            "scan is smaller than the training block");
  }
  BlockPlacement p;
  p.near_nodule = !annotations.empty() && rng.bernoulli(near_nodule_probability(annotations.size(), cfg.base));
  if (p.near_nodule) {
    const auto& a = annotations[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(annotations.size()) - 1))];
    const Vec3 c = geometry.world_to_voxel(a.center_world);
    for (int axis = 0; axis < 3; ++axis) {
      const auto center = static_cast<std::int64_t>(std::llround(c[axis])) +
                          rng.uniform_int(-cfg.jitter_voxels, cfg.jitter_voxels);
      const auto start = center - cfg.block_shape[axis] / 2;
      p.offset[axis] = std::clamp<std::int64_t>(start, 0, geometry.shape[axis] - cfg.block_shape[axis]);
    }
  } else {
    for (int axis = 0; axis < 3; ++axis) {
      p.offset[axis] = rng.uniform_int(0, geometry.shape[axis] - cfg.block_shape[axis]);
    }
  }
  return p;
}

TrainingBlock sample_training_block(const CtVolume& scan, const std::vector<NoduleAnnotation>& annotations,
                                    Rng& rng, const BlockSamplingConfig& cfg) {
  const BlockPlacement p = plan_training_block(scan.geometry(), annotations, rng, cfg);
  TrainingBlock b;
  b.image = crop(scan.image, p.offset, cfg.block_shape);
  b.label = VoxelMask(b.image.geometry(), 0);
  for (const auto& a : annotations) paint_sphere(b.label, a.center_world, a.diameter_mm);
  b.patient_id = annotations.empty() ? std::string{} : annotations.front().patient_id;
  b.sampled_near_nodule = p.near_nodule;
  return b;
}

std::vector<std::size_t> epoch_patient_order(std::size_t patient_count, Rng& rng) {
  std::vector<std::size_t> order(patient_count);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng.engine());
  return order;
}

WeightedLoss weighted_cross_entropy(const Grid3& pred, const VoxelMask& label, double nodule_weight) {
  require(pred.shape() == label.shape(), ErrorKind::kValidation, "prediction and label shapes differ");
  WeightedLoss out;
  out.gradient = Grid3(pred.geometry(), 0.0);
  const double inv_n = pred.empty() ? 0.0 : 1.0 / static_cast<double>(pred.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(pred[i], kProbabilityClamp, 1.0 - kProbabilityClamp);
    const bool clamped = p != pred[i];
    const bool positive = label[i] != 0;
    const double w = positive ? nodule_weight : 1.0;
    if (positive) {
      loss -= w * std::log(p);
      if (!clamped) out.gradient[i] = -w * inv_n / p;
    } else {
      loss -= w * std::log1p(-p);
      if (!clamped) out.gradient[i] = w * inv_n / (1.0 - p);
    }
  }
  out.loss = loss * inv_n;
  return out;
}

}  // namespace lungcad
