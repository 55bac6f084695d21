#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lungcad/augment.hpp"
#include "lungcad/blob_scorer.hpp"
#include "lungcad/candidates.hpp"
#include "lungcad/eval.hpp"
#include "lungcad/features.hpp"
#include "lungcad/mil.hpp"
#include "lungcad/phantom.hpp"

namespace lungcad {

struct CadeConfig {
  Vec3 spacing{1.0, 1.0, 1.0};
  double clip_lo = -1000.0;
  double clip_hi = 400.0;
  TilingConfig tiling;
  std::string scorer = "blob";  // "blob" or "constant"
  BlobScorerParams blob;
  double constant_value = 0.0;
  double candidate_threshold = 0.5;
  bool dual_resolution = true;
  std::int64_t patch_size = kPatchSize;
  std::string extractor = "handcrafted";

  void validate() const;
};

struct CadxConfig {
  RankerConfig ranker;
  MilTrainConfig mil;
  PoolingConfig pooling;
  std::size_t k_each = 2;
  int ensemble = 5;
  double test_fraction = 0.3;
  // CADe operating points for training and testing, in FP per scan; unset
  // keeps every candidate.
  std::optional<double> train_fp_rate;
  std::optional<double> test_fp_rate;
  int mc_samples = 0;  // MC dropout passes per test patient; 0 disables
  double mc_rate = 0.5;

  void validate() const;
};

struct EvalConfig {
  std::size_t bootstrap = 1000;
  double level = 0.95;
  std::size_t calibration_bins = 10;
  std::vector<double> coupling_fp_rates = {0.125, 1.0, 8.0};

  void validate() const;
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  int jobs = 1;
  PhantomConfig phantom;
  AugmentConfig augment;
  CadeConfig cade;
  CadxConfig cadx;
  EvalConfig eval;

  void validate() const;
};

std::unique_ptr<VoxelScorer> make_scorer(const CadeConfig& cfg);

// CADe output for one scan, with features for every candidate.
struct PatientCandidates {
  std::string patient_id;
  int label = -1;
  std::vector<NoduleAnnotation> nodules;
  std::vector<Candidate> candidates_1mm, candidates_2mm;
  std::vector<Eigen::VectorXd> features_1mm, features_2mm;
};

// preprocess -> score -> extract at 1 mm, and again after downsampling to
// 2 mm when dual_resolution is set.
PatientCandidates run_cade(const CtVolume& raw, const std::string& patient_id, const CadeConfig& cfg,
                           const VoxelScorer& scorer, const FeatureExtractor& extractor, int jobs = 1);

// Runs CADe over every manifest entry (or the listed subset). Patients are
// processed in parallel; the result order follows the manifest.
std::vector<PatientCandidates> run_cade_dataset(const DatasetManifest& manifest, const CadeConfig& cfg,
                                                std::uint64_t seed, int jobs = 1);
// Same, for phantoms generated in memory.
std::vector<PatientCandidates> run_cade_phantoms(const PhantomConfig& phantom, std::size_t n_patients,
                                                 std::uint64_t phantom_seed, const CadeConfig& cfg,
                                                 std::uint64_t seed, int jobs = 1);

// <dir>/candidates.csv holds every candidate (1 mm rows, then 2 mm, per
// patient); <dir>/features.csv holds one aligned feature row per candidate.
void save_detections(const std::filesystem::path& dir, const std::vector<PatientCandidates>& patients,
                     const std::vector<std::string>& feature_names);
// Patient order, labels and nodules come from the manifest.
std::vector<PatientCandidates> load_detections(const std::filesystem::path& dir, const DatasetManifest& manifest);

struct DataSplit {
  std::vector<std::size_t> train, test;
};

// Stratified by label, deterministic in `seed`.
DataSplit split_patients(const std::vector<int>& labels, double test_fraction, std::uint64_t seed);

// FROC inputs from the candidates of one resolution, scored by max_score.
std::vector<PatientDetections> to_detections(const std::vector<PatientCandidates>& patients,
                                             const std::vector<std::size_t>& subset,
                                             Resolution resolution = Resolution::k1mm);

// Candidate score threshold for an operating point on the FROC of `subset`.
double threshold_for_fp_rate(const std::vector<PatientCandidates>& patients, const std::vector<std::size_t>& subset,
                             double fp_per_scan);

struct CadxModel {
  RankerModel ranker;
  std::vector<MilModel> members;
  std::size_t k_each = 2;
  double train_threshold = 0.0;
};

struct CadxTrainReport {
  CadxModel model;
  std::vector<std::vector<double>> member_loss;
  std::vector<int> member_selected_epoch;
  std::vector<double> ranker_loss;
};

// Ranker and MIL ensemble on the `train` patients, keeping candidates with
// max_score >= candidate_threshold.
CadxTrainReport train_cadx(const std::vector<PatientCandidates>& patients, const std::vector<std::size_t>& train,
                           double candidate_threshold, const CadxConfig& cfg, std::uint64_t seed);

// Ranked top-k_each per resolution, as raw feature rows. Empty when no
// candidate passes the threshold.
Eigen::MatrixXd build_bag(const PatientCandidates& patient, const RankerModel& ranker, std::size_t k_each,
                          double candidate_threshold);

// Bags without candidates become a single average instance.
Eigen::MatrixXd fill_empty_bag(const Eigen::MatrixXd& bag, const FeatureStandardizer& standardizer);

struct PatientPrediction {
  std::string patient_id;
  int label = -1;
  double prob = 0.0;
  double mc_mean = 0.0;
  double mc_std = 0.0;
  std::size_t bag_size = 0;
  std::vector<double> member_probs;
};

struct CadxEvaluation {
  std::vector<PatientPrediction> predictions;
  RocCurve roc;
  ConfidenceInterval auc_ci;
  Calibration calibration;
  std::vector<double> member_auc;
  double test_threshold = 0.0;
};

CadxEvaluation evaluate_cadx(const CadxModel& model, const std::vector<PatientCandidates>& patients,
                             const std::vector<std::size_t>& test, double candidate_threshold,
                             const CadxConfig& cadx, const EvalConfig& eval, std::uint64_t seed);

struct CouplingResult {
  std::vector<double> fp_rates;
  std::vector<double> thresholds;  // candidate score thresholds from the training FROC
  Eigen::MatrixXd auc;             // rows: training operating point, cols: testing
};

CouplingResult coupling_experiment(const std::vector<PatientCandidates>& patients, const DataSplit& split,
                                   const std::vector<double>& fp_rates, const CadxConfig& cadx,
                                   const EvalConfig& eval, std::uint64_t seed);

}  // namespace lungcad
