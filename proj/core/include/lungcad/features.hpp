#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>
#include <vector>

#include "lungcad/candidates.hpp"
#include "lungcad/nnet.hpp"

namespace lungcad {

inline constexpr std::int64_t kPatchSize = 32;

// Cubic neighborhood around a candidate on the grid it was detected on.
// Voxels outside the scan are NaN in both grids.
struct CandidatePatch {
  Grid3 intensity;
  ProbMap probability;
  Candidate candidate;
};

CandidatePatch extract_patch(const CtVolume& volume, const ProbMap& pm, const Candidate& candidate,
                             std::int64_t size = kPatchSize);

class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual Eigen::Index dim() const = 0;
  virtual std::vector<std::string> names() const = 0;
  virtual Eigen::VectorXd extract(const CandidatePatch& patch) const = 0;
};

// Size, score, intensity and shape descriptors of one candidate.
class HandcraftedExtractor final : public FeatureExtractor {
 public:
  Eigen::Index dim() const override;
  std::vector<std::string> names() const override;
  Eigen::VectorXd extract(const CandidatePatch& patch) const override;
};

// Penultimate activations of the base network on the intensity patch.
class BaseNetExtractor final : public FeatureExtractor {
 public:
  explicit BaseNetExtractor(nnet::BaseNetParams params);
  Eigen::Index dim() const override;
  std::vector<std::string> names() const override;
  Eigen::VectorXd extract(const CandidatePatch& patch) const override;

 private:
  nnet::BaseNetParams params_;
};

std::unique_ptr<FeatureExtractor> make_feature_extractor(const std::string& name, std::uint64_t seed);

}  // namespace lungcad
