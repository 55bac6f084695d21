#pragma once

#include <Eigen/Dense>

#include "lungcad/rng.hpp"
#include "lungcad/volume.hpp"

namespace lungcad {

struct AugmentConfig {
  double scale_sigma = 0.06;       // per-axis factor 1 + N(0, scale_sigma)
  double translate_sigma = 1.0;    // mm
  double gamma_lo = 0.7;
  double gamma_hi = 1.3;
  double blur_sigma_max = 1.5;     // mm, sigma ~ U(0, blur_sigma_max)
  double noise_sigma = 0.03;       // noise sigma ~ |N(0, noise_sigma)|
  double cade_scale_boost = 3.0;   // sigma multiplier for upscale-only zoom in CADe mode

  bool rotate = true;
  bool reflect = true;
  bool scale = true;
  bool translate = true;
  bool gamma = true;
  bool blur = true;
  bool noise = true;

  void validate() const;
  static AugmentConfig disabled();
};

enum class AugmentMode { kCadx, kCade };

struct AffineTransform {
  Eigen::Matrix3d linear = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();  // mm

  static AffineTransform identity() { return {}; }
  bool is_invertible() const { return std::abs(linear.determinant()) > 1e-9; }
};

// Uniform rotation on SO(3) via a normalized Gaussian quaternion.
Eigen::Matrix3d sample_rotation(Rng& rng);

// linear = rotation * reflection * scale
AffineTransform sample_affine(Rng& rng, const AugmentConfig& cfg, AugmentMode mode);

// Output voxel v (about the output center) takes the trilinear sample of
// `block` at linear^-1 (v - translation) about the input center. Spacing is
// taken from the block geometry; samples outside the block take the block
// minimum.
Grid3 apply_affine(const Grid3& block, const AffineTransform& transform, Shape3 out_shape);

enum class FilterMode { kBlur, kUnsharp };

Grid3 gamma_transform(const Grid3& block, double gamma);
Grid3 blur_or_unsharp(const Grid3& block, double sigma_mm, FilterMode mode);
Grid3 gaussian_blur(const Grid3& block, double sigma_mm);
Grid3 add_noise(const Grid3& block, double sigma, Rng& rng);

// affine -> gamma -> blur/unsharp (fair coin) -> noise
Grid3 augment(const Grid3& block, Rng& rng, const AugmentConfig& cfg, AugmentMode mode,
              Shape3 out_shape);
inline Grid3 augment(const Grid3& block, Rng& rng, const AugmentConfig& cfg, AugmentMode mode) {
  return augment(block, rng, cfg, mode, block.shape());
}

}  // namespace lungcad
