#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lungcad/error.hpp"

namespace lungcad {

struct Vec3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  double& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }

  friend Vec3 operator+(Vec3 a, Vec3 b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
  friend Vec3 operator-(Vec3 a, Vec3 b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
  friend Vec3 operator*(Vec3 a, double s) { return {a.x * s, a.y * s, a.z * s}; }
  friend Vec3 operator*(double s, Vec3 a) { return a * s; }
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

inline double dot(Vec3 a, Vec3 b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline double norm(Vec3 a) { return std::sqrt(dot(a, a)); }
inline double distance(Vec3 a, Vec3 b) { return norm(a - b); }

// Voxel counts along (x, y, z). x is the fastest-varying axis in memory,
// matching MetaImage raw layout.
struct Shape3 {
  std::int64_t nx = 0;
  std::int64_t ny = 0;
  std::int64_t nz = 0;

  std::int64_t operator[](int axis) const { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
  std::int64_t& operator[](int axis) { return axis == 0 ? nx : (axis == 1 ? ny : nz); }
  std::size_t voxels() const { return static_cast<std::size_t>(nx * ny * nz); }
  bool empty() const { return nx <= 0 || ny <= 0 || nz <= 0; }

  static Shape3 cube(std::int64_t n) { return {n, n, n}; }
  friend bool operator==(const Shape3&, const Shape3&) = default;
};

struct Index3 {
  std::int64_t x = 0;
  std::int64_t y = 0;
  std::int64_t z = 0;

  std::int64_t operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  std::int64_t& operator[](int axis) { return axis == 0 ? x : (axis == 1 ? y : z); }
  friend bool operator==(const Index3&, const Index3&) = default;
};

// Voxel lattice placement in world (mm) space. Axis-aligned; voxel centers
// sit at origin + index * spacing.
struct Geometry {
  Shape3 shape;
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  Vec3 world_to_voxel(Vec3 world) const {
    return {(world.x - origin.x) / spacing.x, (world.y - origin.y) / spacing.y,
            (world.z - origin.z) / spacing.z};
  }
  Vec3 voxel_to_world(Vec3 voxel) const {
    return {origin.x + voxel.x * spacing.x, origin.y + voxel.y * spacing.y,
            origin.z + voxel.z * spacing.z};
  }
  Vec3 voxel_to_world(Index3 v) const {
    return voxel_to_world(Vec3{static_cast<double>(v.x), static_cast<double>(v.y),
                               static_cast<double>(v.z)});
  }
  // Continuous voxel coordinates lie in [-0.5, n - 0.5) on every axis.
  bool contains_world(Vec3 world) const;
  double voxel_volume_mm3() const { return spacing.x * spacing.y * spacing.z; }

  void validate() const;
  friend bool operator==(const Geometry&, const Geometry&) = default;
};

inline Vec3 world_to_voxel(Vec3 world, const Geometry& g) { return g.world_to_voxel(world); }
inline Vec3 voxel_to_world(Vec3 voxel, const Geometry& g) { return g.voxel_to_world(voxel); }

template <typename T>
class Image3 {
 public:
  using value_type = T;

  Image3() = default;
  explicit Image3(Geometry geometry, T fill = T{})
      : geometry_(std::move(geometry)), data_(geometry_.shape.voxels(), fill) {
    geometry_.validate();
  }
  Image3(Geometry geometry, std::vector<T> data)
      : geometry_(std::move(geometry)), data_(std::move(data)) {
    geometry_.validate();
    require(data_.size() == geometry_.shape.voxels(), ErrorKind::kValidation,
            "image data length does not match its shape");
  }
  explicit Image3(Shape3 shape, T fill = T{}) : Image3(Geometry{shape, {1, 1, 1}, {0, 0, 0}}, fill) {}

  const Geometry& geometry() const { return geometry_; }
  Geometry& geometry() { return geometry_; }
  const Shape3& shape() const { return geometry_.shape; }
  std::int64_t nx() const { return geometry_.shape.nx; }
  std::int64_t ny() const { return geometry_.shape.ny; }
  std::int64_t nz() const { return geometry_.shape.nz; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return static_cast<std::size_t>((z * geometry_.shape.ny + y) * geometry_.shape.nx + x);
  }
  Index3 unravel(std::size_t i) const {
    const auto n = static_cast<std::int64_t>(i);
    const auto nx = geometry_.shape.nx;
    const auto ny = geometry_.shape.ny;
    return {n % nx, (n / nx) % ny, n / (nx * ny)};
  }
  bool in_bounds(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < nx() && y < ny() && z < nz();
  }

  T& operator()(std::int64_t x, std::int64_t y, std::int64_t z) { return data_[index(x, y, z)]; }
  const T& operator()(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return data_[index(x, y, z)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  friend bool operator==(const Image3&, const Image3&) = default;

 private:
  Geometry geometry_;
  std::vector<T> data_;
};

using Grid3 = Image3<double>;
// Values in {0, 1}.
using VoxelMask = Image3<std::uint8_t>;
// Values in [0, 1].
using ProbMap = Image3<double>;

// Raw scanner values are clamped to the 12-bit CT range on ingestion.
inline constexpr double kRawHuMin = -1024.0;
inline constexpr double kRawHuMax = 3071.0;

struct CtVolume {
  Grid3 image;
  bool normalized = false;

  const Geometry& geometry() const { return image.geometry(); }
};

struct NoduleAnnotation {
  std::string patient_id;
  Vec3 center_world;
  double diameter_mm = 0.0;
  std::vector<int> radiologist_scores;

  void validate() const;
};

// Sets every voxel whose world-space center lies strictly within
// diameter/2 of `center_world`. No bounds checks: spheres partially or
// entirely outside the grid are clipped.
void paint_sphere(VoxelMask& mask, Vec3 center_world, double diameter_mm);

// Spherical ground-truth mask for one annotation.
VoxelMask rasterize_annotation(const NoduleAnnotation& annotation, const Geometry& grid);

std::size_t count_nonzero(const VoxelMask& mask);

// Cuts an axis-aligned sub-block. Geometry origin is shifted so world
// coordinates are preserved. `offset` + `extent` must lie inside `image`.
template <typename T>
Image3<T> crop(const Image3<T>& image, Index3 offset, Shape3 extent) {
  for (int a = 0; a < 3; ++a) {
    require(offset[a] >= 0 && extent[a] > 0 && offset[a] + extent[a] <= image.shape()[a],
            ErrorKind::kOutOfBounds, "crop window exceeds image bounds");
  }
  Geometry g = image.geometry();
  g.shape = extent;
  g.origin = image.geometry().voxel_to_world(offset);
  Image3<T> out(g);
  for (std::int64_t z = 0; z < extent.nz; ++z)
    for (std::int64_t y = 0; y < extent.ny; ++y)
      for (std::int64_t x = 0; x < extent.nx; ++x)
        out(x, y, z) = image(offset.x + x, offset.y + y, offset.z + z);
  return out;
}

// Like crop, but the window may extend past the image; outside voxels
// take `fill`.
template <typename T>
Image3<T> crop_padded(const Image3<T>& image, Index3 offset, Shape3 extent, T fill) {
  Geometry g = image.geometry();
  g.shape = extent;
  g.origin = image.geometry().voxel_to_world(offset);
  Image3<T> out(g, fill);
  for (std::int64_t z = 0; z < extent.nz; ++z)
    for (std::int64_t y = 0; y < extent.ny; ++y)
      for (std::int64_t x = 0; x < extent.nx; ++x) {
        const auto sx = offset.x + x, sy = offset.y + y, sz = offset.z + z;
        if (image.in_bounds(sx, sy, sz)) out(x, y, z) = image(sx, sy, sz);
      }
  return out;
}

}  // namespace lungcad
