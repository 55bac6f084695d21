#include "lungcad/preprocess.hpp"

#include <algorithm>
#include <cmath>

namespace lungcad {

CtVolume clip_hu(const CtVolume& volume, double lo, double hi) {
  require(!volume.normalized, ErrorKind::kValidation, "clip_hu expects an unnormalized volume");
  CtVolume out = volume;
  for (double& v : out.image.data()) v = std::clamp(v, lo, hi);
  return out;
}

double sample_trilinear(const Grid3& image, Vec3 voxel) {
  std::int64_t i0[3], i1[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    const auto n = image.shape()[a];
    const double c = std::clamp(voxel[a], 0.0, static_cast<double>(n - 1));
    const double fl = std::floor(c);
    i0[a] = static_cast<std::int64_t>(fl);
    i1[a] = std::min(i0[a] + 1, n - 1);
    f[a] = c - fl;
  }
  const double c000 = image(i0[0], i0[1], i0[2]), c100 = image(i1[0], i0[1], i0[2]);
  const double c010 = image(i0[0], i1[1], i0[2]), c110 = image(i1[0], i1[1], i0[2]);
  const double c001 = image(i0[0], i0[1], i1[2]), c101 = image(i1[0], i0[1], i1[2]);
  const double c011 = image(i0[0], i1[1], i1[2]), c111 = image(i1[0], i1[1], i1[2]);
  const double c00 = c000 + (c100 - c000) * f[0];
  const double c10 = c010 + (c110 - c010) * f[0];
  const double c01 = c001 + (c101 - c001) * f[0];
  const double c11 = c011 + (c111 - c011) * f[0];
  const double c0 = c00 + (c10 - c00) * f[1];
  const double c1 = c01 + (c11 - c01) * f[1];
  return c0 + (c1 - c0) * f[2];
}

CtVolume resample(const CtVolume& volume, Vec3 target_spacing) {
  for (int a = 0; a < 3; ++a) {
    require(target_spacing[a] > 0.0 && std::isfinite(target_spacing[a]), ErrorKind::kValidation,
            "resample target spacing must be positive");
  }
  const Geometry& src = volume.geometry();
  require(!src.shape.empty(), ErrorKind::kValidation, "cannot resample an empty volume");
  Geometry dst;
  dst.origin = src.origin;
  dst.spacing = target_spacing;
  double ratio[3];
  for (int a = 0; a < 3; ++a) {
    const double n = std::round(static_cast<double>(src.shape[a]) * src.spacing[a] / target_spacing[a]);
    dst.shape[a] = std::max<std::int64_t>(1, static_cast<std::int64_t>(n));
    ratio[a] = target_spacing[a] / src.spacing[a];
  }
  Grid3 out(dst);
  const bool identity = dst.shape == src.shape && ratio[0] == 1.0 && ratio[1] == 1.0 && ratio[2] == 1.0;
  if (identity) {
    out.data() = volume.image.data();
  } else {
    for (std::int64_t z = 0; z < dst.shape.nz; ++z)
      for (std::int64_t y = 0; y < dst.shape.ny; ++y)
        for (std::int64_t x = 0; x < dst.shape.nx; ++x)
          out(x, y, z) = sample_trilinear(volume.image, {x * ratio[0], y * ratio[1], z * ratio[2]});
  }
  return {std::move(out), volume.normalized};
}

CtVolume normalize(const CtVolume& volume) {
  const auto& d = volume.image.data();
  require(!d.empty(), ErrorKind::kDegenerateInput, "cannot normalize an empty volume");
  const double n = static_cast<double>(d.size());
  double mean = 0.0;
  for (double v : d) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : d) var += (v - mean) * (v - mean);
  var /= n;
  require(var > 0.0, ErrorKind::kDegenerateInput, "cannot normalize a constant volume");
  const double inv_sd = 1.0 / std::sqrt(var);
  CtVolume out = volume;
  for (double& v : out.image.data()) v = (v - mean) * inv_sd;
  out.normalized = true;
  return out;
}

CtVolume preprocess(const CtVolume& raw, Vec3 target_spacing) {
  return normalize(resample(clip_hu(raw), target_spacing));
}

}  // namespace lungcad
