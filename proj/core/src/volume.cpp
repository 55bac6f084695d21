#include "lungcad/volume.hpp"

#include <algorithm>

namespace lungcad {

bool Geometry::contains_world(Vec3 world) const {
  const Vec3 v = world_to_voxel(world);
  for (int a = 0; a < 3; ++a) {
    if (!(v[a] >= -0.5 && v[a] < static_cast<double>(shape[a]) - 0.5)) return false;
  }
  return true;
}

void Geometry::validate() const {
  for (int a = 0; a < 3; ++a) {
    require(shape[a] >= 0, ErrorKind::kValidation, "negative voxel count");
    require(spacing[a] > 0.0 && std::isfinite(spacing[a]), ErrorKind::kValidation,
            "voxel spacing must be positive");
    require(std::isfinite(origin[a]), ErrorKind::kValidation, "origin must be finite");
  }
}

void NoduleAnnotation::validate() const {
  require(diameter_mm > 0.0 && std::isfinite(diameter_mm), ErrorKind::kValidation,
          "nodule diameter must be positive (patient " + patient_id + ")");
  require(radiologist_scores.size() <= 4, ErrorKind::kValidation,
          "at most four radiologist scores per nodule");
  for (int s : radiologist_scores) {
    require(s >= 1 && s <= 5, ErrorKind::kValidation,
            "radiologist score outside 1..5: " + std::to_string(s));
  }
}

void paint_sphere(VoxelMask& mask, Vec3 center_world, double diameter_mm) {
  const Geometry& g = mask.geometry();
  const double r = diameter_mm / 2.0;
  const double r2 = r * r;
  Index3 lo, hi;
  for (int a = 0; a < 3; ++a) {
    const double c = (center_world[a] - g.origin[a]) / g.spacing[a];
    const double ext = r / g.spacing[a];
    lo[a] = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::floor(c - ext)));
    hi[a] = std::min<std::int64_t>(g.shape[a] - 1, static_cast<std::int64_t>(std::ceil(c + ext)));
  }
  for (std::int64_t z = lo.z; z <= hi.z; ++z) {
    const double dz = g.origin.z + z * g.spacing.z - center_world.z;
    for (std::int64_t y = lo.y; y <= hi.y; ++y) {
      const double dy = g.origin.y + y * g.spacing.y - center_world.y;
      for (std::int64_t x = lo.x; x <= hi.x; ++x) {
        const double dx = g.origin.x + x * g.spacing.x - center_world.x;
        if (dx * dx + dy * dy + dz * dz < r2) mask(x, y, z) = 1;
      }
    }
  }
}

VoxelMask rasterize_annotation(const NoduleAnnotation& annotation, const Geometry& grid) {
  annotation.validate();
  require(grid.contains_world(annotation.center_world), ErrorKind::kOutOfBounds,
          "annotation center lies outside the volume (patient " + annotation.patient_id + ")");
  VoxelMask mask(grid, 0);
  paint_sphere(mask, annotation.center_world, annotation.diameter_mm);
  return mask;
}

std::size_t count_nonzero(const VoxelMask& mask) {
  return static_cast<std::size_t>(
      std::count_if(mask.data().begin(), mask.data().end(), [](std::uint8_t v) { return v != 0; }));
}

}  // namespace lungcad
