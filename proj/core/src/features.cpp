#include "lungcad/features.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace lungcad {

CandidatePatch extract_patch(const CtVolume& volume, const ProbMap& pm, const Candidate& candidate,
                             std::int64_t size) {
  require(volume.geometry() == pm.geometry(), ErrorKind::kValidation, "volume and probability map grids differ");
  require(size > 0, ErrorKind::kValidation, "patch size must be positive");
  const Vec3 v = volume.geometry().world_to_voxel(candidate.center_world);
  const Index3 offset{static_cast<std::int64_t>(std::llround(v.x)) - size / 2,
                      static_cast<std::int64_t>(std::llround(v.y)) - size / 2,
                      static_cast<std::int64_t>(std::llround(v.z)) - size / 2};
  const double nan = std::numeric_limits<double>::quiet_NaN();
  return {crop_padded(volume.image, offset, Shape3::cube(size), nan), crop_padded(pm, offset, Shape3::cube(size), nan),
          candidate};
}

namespace {

constexpr const char* kHandcraftedNames[] = {
    "equivalent_diameter_mm", "log_volume_mm3", "mean_score", "max_score",   "inner_mean", "inner_std",
    "inner_p10",              "inner_p90",      "shell_contrast", "compactness", "elongation", "is_2mm",
};

double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  const auto k = static_cast<std::size_t>(std::floor(q * static_cast<double>(v.size() - 1)));
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end());
  return v[k];
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

Eigen::Index HandcraftedExtractor::dim() const { return std::size(kHandcraftedNames); }

std::vector<std::string> HandcraftedExtractor::names() const {
  return {std::begin(kHandcraftedNames), std::end(kHandcraftedNames)};
}

Eigen::VectorXd HandcraftedExtractor::extract(const CandidatePatch& patch) const {
  const Candidate& c = patch.candidate;
  const Geometry& g = patch.intensity.geometry();
  const double finest = std::min({g.spacing.x, g.spacing.y, g.spacing.z});
  const double radius = std::max(c.equivalent_diameter_mm / 2.0, 0.5 * finest + 1e-9);
  const double shell_outer = std::max(2.0 * radius, radius + finest);

  std::vector<double> inner, shell;
  std::vector<Vec3> region;
  std::size_t region_inside = 0;
  for (std::int64_t z = 0; z < g.shape.nz; ++z)
    for (std::int64_t y = 0; y < g.shape.ny; ++y)
      for (std::int64_t x = 0; x < g.shape.nx; ++x) {
        const double value = patch.intensity(x, y, z);
        if (!std::isfinite(value)) continue;
        const Vec3 w = g.voxel_to_world(Index3{x, y, z});
        const double r = distance(w, c.center_world);
        if (r < radius) {
          inner.push_back(value);
        } else if (r < shell_outer) {
          shell.push_back(value);
        }
        if (patch.probability(x, y, z) > 0.5 && r < shell_outer) {
          region.push_back(w);
          region_inside += r < radius;
        }
      }

  double inner_std = 0.0;
  const double inner_mean = mean_of(inner);
  for (double v : inner) inner_std += (v - inner_mean) * (v - inner_mean);
  inner_std = inner.empty() ? 0.0 : std::sqrt(inner_std / static_cast<double>(inner.size()));

  double elongation = 1.0;
  if (region.size() >= 4) {
    Eigen::Vector3d mu = Eigen::Vector3d::Zero();
    for (const auto& p : region) mu += Eigen::Vector3d(p.x, p.y, p.z);
    mu /= static_cast<double>(region.size());
    Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
    for (const auto& p : region) {
      const Eigen::Vector3d d = Eigen::Vector3d(p.x, p.y, p.z) - mu;
      cov += d * d.transpose();
    }
    cov /= static_cast<double>(region.size());
    const Eigen::Vector3d ev = Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(cov, Eigen::EigenvaluesOnly).eigenvalues();
    if (ev[0] > 1e-9) elongation = std::sqrt(ev[2] / ev[0]);
  }

  Eigen::VectorXd f(dim());
  f << c.equivalent_diameter_mm, std::log1p(c.volume_mm3), c.mean_score, c.max_score, inner_mean, inner_std,
      percentile(inner, 0.1), percentile(inner, 0.9), inner_mean - (shell.empty() ? inner_mean : mean_of(shell)),
      region.empty() ? 0.0 : static_cast<double>(region_inside) / static_cast<double>(region.size()), elongation,
      c.resolution == Resolution::k2mm ? 1.0 : 0.0;
  return f;
}

BaseNetExtractor::BaseNetExtractor(nnet::BaseNetParams params) : params_(std::move(params)) { params_.validate(); }

Eigen::Index BaseNetExtractor::dim() const { return params_.dense1_w.rows(); }

std::vector<std::string> BaseNetExtractor::names() const {
  std::vector<std::string> n;
  for (Eigen::Index i = 0; i < dim(); ++i) n.push_back("basenet_" + std::to_string(i));
  return n;
}

Eigen::VectorXd BaseNetExtractor::extract(const CandidatePatch& patch) const {
  require(patch.intensity.shape() == Shape3::cube(static_cast<std::int64_t>(nnet::kBaseNetInput)),
          ErrorKind::kValidation, "base net features need 32^3 patches");
  double fill = std::numeric_limits<double>::infinity();
  for (double v : patch.intensity.data())
    if (std::isfinite(v)) fill = std::min(fill, v);
  if (!std::isfinite(fill)) fill = 0.0;
  Grid3 block = patch.intensity;
  for (double& v : block.data())
    if (!std::isfinite(v)) v = fill;
  return nnet::base_net_forward(nnet::from_grid(block), params_, nnet::ForwardMode::kDeterministic).features;
}

std::unique_ptr<FeatureExtractor> make_feature_extractor(const std::string& name, std::uint64_t seed) {
  if (name == "handcrafted") return std::make_unique<HandcraftedExtractor>();
  if (name == "basenet_random") {
    Rng rng(seed);
    return std::make_unique<BaseNetExtractor>(nnet::random_base_net(rng));
  }
  fail(ErrorKind::kConfiguration, "unknown feature extractor '" + name + "'");
}

}  // namespace lungcad
