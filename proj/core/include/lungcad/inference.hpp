#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "lungcad/volume.hpp"

namespace lungcad {

// Behavioral contract for voxelwise nodule scorers. Implementations must be
// local: the output at v depends only on inputs within Chebyshev distance
// fov_radius() of v. Out-of-block neighbors may be handled arbitrarily but
// identically at every block border, so that a voxel whose window lies inside
// the block scores the same as in a single pass over the whole volume.
class VoxelScorer {
 public:
  virtual ~VoxelScorer() = default;
  virtual ProbMap score(const Grid3& block) const = 0;
  // Receptive-field half width, in voxels, for blocks with this spacing.
  virtual std::int64_t fov_radius(const Vec3& spacing) const = 0;
};

// Scores everything with one constant. Used by tests and the CLI's null scorer.
class ConstantScorer final : public VoxelScorer {
 public:
  explicit ConstantScorer(double value) : value_(value) {}
  ProbMap score(const Grid3& block) const override { return ProbMap(block.geometry(), value_); }
  std::int64_t fov_radius(const Vec3&) const override { return 0; }

 private:
  double value_;
};

struct TilingConfig {
  Shape3 block_shape = Shape3::cube(256);
  std::int64_t margin = 32;

  void validate() const;
};

struct TileBlock {
  Index3 offset;
  Shape3 extent;
  // Half-open interior [interior_lo, interior_hi); interiors of all blocks
  // partition the volume.
  Index3 interior_lo;
  Index3 interior_hi;
};

std::vector<TileBlock> split_blocks(Shape3 shape, const TilingConfig& cfg);

// Blend weight of one block at voxel `local` (block coordinates). Along each
// axis: 1 at edges that coincide with the volume border, otherwise a linear
// ramp from 0 at distance fov_radius - 1 up to 1 at distance margin - 1 from
// the block edge.
double stitch_weight(const TileBlock& block, Index3 local, Shape3 volume_shape, std::int64_t margin,
                     std::int64_t fov_radius = 0);

// Weight-normalized blend of per-block outputs (same order as `blocks`).
ProbMap stitch(const std::vector<ProbMap>& block_outputs, const std::vector<TileBlock>& blocks,
               const Geometry& geometry, const TilingConfig& cfg, std::int64_t fov_radius = 0);

// split -> score each block -> stitch. Blocks are scored on up to `jobs`
// threads; the result does not depend on completion order.
ProbMap score_volume(const CtVolume& volume, const VoxelScorer& scorer, const TilingConfig& cfg,
                     int jobs = 1);

enum class Resolution { k1mm, k2mm };
const char* to_string(Resolution r);
Resolution resolution_from_string(const std::string& s);
// k2mm when the finest spacing is at least 1.5 mm.
Resolution resolution_of(const Geometry& geometry);

CtVolume downsample_pass(const CtVolume& volume, double target_mm = 2.0);

}  // namespace lungcad
