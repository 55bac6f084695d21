#include "lungcad/augment.hpp"

#include <algorithm>
#include <cmath>

#include "lungcad/preprocess.hpp"

namespace lungcad {

void AugmentConfig::validate() const {
  require(gamma_lo <= gamma_hi && gamma_lo > 0.0, ErrorKind::kValidation, "gamma range must satisfy 0 < lo <= hi");
  require(scale_sigma >= 0 && translate_sigma >= 0 && blur_sigma_max >= 0 && noise_sigma >= 0 &&
              cade_scale_boost >= 0,
          ErrorKind::kValidation, "augmentation sigmas must be non-negative");
}

AugmentConfig AugmentConfig::disabled() {
  AugmentConfig c;
  c.rotate = c.reflect = c.scale = c.translate = c.gamma = c.blur = c.noise = false;
  return c;
}

Eigen::Matrix3d sample_rotation(Rng& rng) {
  Eigen::Quaterniond q;
  double n = 0.0;
  do {
    q = Eigen::Quaterniond(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    n = q.norm();
  } while (n < 1e-12);
  q.coeffs() /= n;
  return q.toRotationMatrix();
}

AffineTransform sample_affine(Rng& rng, const AugmentConfig& cfg, AugmentMode mode) {
  cfg.validate();
  AffineTransform t;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  if (cfg.rotate) rotation = sample_rotation(rng);
  Eigen::Matrix3d reflection = Eigen::Matrix3d::Identity();
  if (cfg.reflect) {
    for (int a = 0; a < 3; ++a) reflection(a, a) = rng.bernoulli(0.5) ? -1.0 : 1.0;
  }
  Eigen::Matrix3d scale = Eigen::Matrix3d::Identity();
  if (cfg.scale) {
    for (int a = 0; a < 3; ++a) scale(a, a) = 1.0 + rng.normal(0.0, cfg.scale_sigma);
    if (mode == AugmentMode::kCade) {
      const double zoom = std::max(1.0, 1.0 + rng.normal(0.0, cfg.cade_scale_boost * cfg.scale_sigma));
      scale *= zoom;
    }
  }
  t.linear = rotation * reflection * scale;
  if (cfg.translate) {
    for (int a = 0; a < 3; ++a) t.translation[a] = rng.normal(0.0, cfg.translate_sigma);
  }
  return t;
}

Grid3 apply_affine(const Grid3& block, const AffineTransform& transform, Shape3 out_shape) {
  require(!block.empty(), ErrorKind::kValidation, "apply_affine on an empty block");
  require(transform.is_invertible(), ErrorKind::kValidation, "affine transform is singular");
  const Geometry& g = block.geometry();
  const Eigen::Matrix3d inv = transform.linear.inverse();
  const double fill = *std::min_element(block.data().begin(), block.data().end());

  Geometry og = g;
  og.shape = out_shape;
  Grid3 out(og, fill);
  const Eigen::Vector3d spacing(g.spacing.x, g.spacing.y, g.spacing.z);
  Eigen::Vector3d in_center, out_center;
  for (int a = 0; a < 3; ++a) {
    in_center[a] = (static_cast<double>(g.shape[a]) - 1.0) / 2.0;
    out_center[a] = (static_cast<double>(out_shape[a]) - 1.0) / 2.0;
  }
  constexpr double kSnap = 1e-9;
  for (std::int64_t z = 0; z < out_shape.nz; ++z)
    for (std::int64_t y = 0; y < out_shape.ny; ++y)
      for (std::int64_t x = 0; x < out_shape.nx; ++x) {
        // Work in mm so anisotropic spacing rotates correctly.
        const Eigen::Vector3d p =
            (Eigen::Vector3d(x, y, z) - out_center).cwiseProduct(spacing) - transform.translation;
        const Eigen::Vector3d q = (inv * p).cwiseQuotient(spacing) + in_center;
        Vec3 src;
        bool inside = true;
        for (int a = 0; a < 3; ++a) {
          double c = q[a];
          const double r = std::round(c);
          if (std::abs(c - r) < kSnap) c = r;
          if (c < 0.0 || c > static_cast<double>(g.shape[a] - 1)) inside = false;
          src[a] = c;
        }
        if (inside) out(x, y, z) = sample_trilinear(block, src);
      }
  return out;
}

Grid3 gamma_transform(const Grid3& block, double gamma) {
  require(gamma > 0.0 && std::isfinite(gamma), ErrorKind::kValidation, "gamma must be positive");
  const auto [mn, mx] = std::minmax_element(block.data().begin(), block.data().end());
  if (block.empty() || *mn == *mx || gamma == 1.0) return block;
  const double lo = *mn, range = *mx - *mn;
  Grid3 out = block;
  for (double& v : out.data()) {
    const double u = std::clamp((v - lo) / range, 0.0, 1.0);
    v = lo + range * std::pow(u, gamma);
  }
  return out;
}

namespace {

std::vector<double> gaussian_kernel(double sigma_voxels) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma_voxels));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma_voxels * sigma_voxels));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

void convolve_axis(const Grid3& in, Grid3& out, int axis, const std::vector<double>& kernel) {
  const int radius = static_cast<int>(kernel.size() / 2);
  const auto n = in.shape()[axis];
  for (std::int64_t z = 0; z < in.nz(); ++z)
    for (std::int64_t y = 0; y < in.ny(); ++y)
      for (std::int64_t x = 0; x < in.nx(); ++x) {
        Index3 p{x, y, z};
        const auto c = p[axis];
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) {
          p[axis] = std::clamp<std::int64_t>(c + k, 0, n - 1);
          acc += kernel[k + radius] * in(p.x, p.y, p.z);
        }
        out(x, y, z) = acc;
      }
}

}  // namespace

Grid3 gaussian_blur(const Grid3& block, double sigma_mm) {
  require(sigma_mm >= 0.0, ErrorKind::kValidation, "blur sigma must be non-negative");
  if (sigma_mm == 0.0 || block.empty()) return block;
  Grid3 a = block, b = block;
  for (int axis = 0; axis < 3; ++axis) {
    const double sv = sigma_mm / block.geometry().spacing[axis];
    convolve_axis(a, b, axis, gaussian_kernel(sv));
    std::swap(a, b);
  }
  return a;
}

Grid3 blur_or_unsharp(const Grid3& block, double sigma_mm, FilterMode mode) {
  Grid3 blurred = gaussian_blur(block, sigma_mm);
  if (mode == FilterMode::kBlur || sigma_mm == 0.0) return blurred;
  Grid3 out = block;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 2.0 * block[i] - blurred[i];
  return out;
}

Grid3 add_noise(const Grid3& block, double sigma, Rng& rng) {
  sigma = std::abs(sigma);
  if (sigma == 0.0) return block;
  Grid3 out = block;
  std::normal_distribution<double> dist(0.0, sigma);
  for (double& v : out.data()) v += dist(rng.engine());
  return out;
}

Grid3 augment(const Grid3& block, Rng& rng, const AugmentConfig& cfg, AugmentMode mode, Shape3 out_shape) {
  cfg.validate();
  Rng affine_rng = rng.fork();
  Rng gamma_rng = rng.fork();
  Rng filter_rng = rng.fork();
  Rng noise_rng = rng.fork();

  Grid3 out = block;
  const bool any_affine = cfg.rotate || cfg.reflect || cfg.scale || cfg.translate;
  if (any_affine || !(out_shape == block.shape())) {
    out = apply_affine(out, sample_affine(affine_rng, cfg, mode), out_shape);
  }
  if (cfg.gamma) out = gamma_transform(out, gamma_rng.uniform(cfg.gamma_lo, cfg.gamma_hi));
  if (cfg.blur) {
    const auto filter = filter_rng.bernoulli(0.5) ? FilterMode::kBlur : FilterMode::kUnsharp;
    out = blur_or_unsharp(out, filter_rng.uniform(0.0, cfg.blur_sigma_max), filter);
  }
  if (cfg.noise) out = add_noise(out, noise_rng.normal(0.0, cfg.noise_sigma), noise_rng);
  return out;
}

}  // namespace lungcad
