#pragma once

#include <memory>
#include <mutex>
#include <vector>

#include "lungcad/inference.hpp"

namespace lungcad {

struct BlobScorerParams {
  // Probe radii in mm. The default ladder doubles every two steps so that
  // shell outer radii reuse inner radii.
  std::vector<double> radii_mm = {2.0, 2.0 * 1.4142135623730951, 4.0, 4.0 * 1.4142135623730951, 8.0};
  double threshold = 4.0;  // contrast, in input intensity units
  double steepness = 0.6;  // logistic slope per intensity unit

  void validate() const;
};

// Analytic spherical matched filter. For each probe radius r:
//   c_r(v) = mean(I within r of v) - mean(I in the shell r < d <= 2r)
// and score(v) = logistic(steepness * (max_r c_r(v) - threshold)).
// Neighbors outside the block replicate the nearest edge voxel. Ball sums are
// evaluated by FFT convolution.
class BlobScorer final : public VoxelScorer {
 public:
  explicit BlobScorer(BlobScorerParams params);
  ~BlobScorer() override;

  ProbMap score(const Grid3& block) const override;
  // ceil(2 * max radius / spacing) on the finest axis.
  std::int64_t fov_radius(const Vec3& spacing) const override;

  // Raw max-over-radii contrast, before the logistic.
  Grid3 contrast(const Grid3& block) const;

  const BlobScorerParams& params() const { return params_; }

 private:
  struct SpectrumCache;
  BlobScorerParams params_;
  std::vector<double> kernel_radii_;  // sorted union of r and 2r
  std::unique_ptr<SpectrumCache> cache_;
};

std::unique_ptr<VoxelScorer> reference_blob_scorer(BlobScorerParams params = {});

double logistic(double x);

}  // namespace lungcad
