#pragma once

#include "lungcad/volume.hpp"

namespace lungcad {

inline constexpr double kClipHuMin = -1000.0;
inline constexpr double kClipHuMax = 400.0;

CtVolume clip_hu(const CtVolume& volume, double lo = kClipHuMin, double hi = kClipHuMax);

// Trilinear resampling onto a lattice with `target_spacing`, keeping the
// origin. New shape is round(n * spacing / target) per axis (at least 1).
// Samples outside the source lattice clamp to the edge.
CtVolume resample(const CtVolume& volume, Vec3 target_spacing);

// Zero mean, unit population variance.
CtVolume normalize(const CtVolume& volume);

// clip -> resample -> normalize
CtVolume preprocess(const CtVolume& raw, Vec3 target_spacing = {1.0, 1.0, 1.0});

// Trilinear sample at continuous voxel coordinates with edge clamping.
double sample_trilinear(const Grid3& image, Vec3 voxel);

}  // namespace lungcad
