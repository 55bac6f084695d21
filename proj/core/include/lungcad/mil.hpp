#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <vector>

#include "lungcad/candidates.hpp"
#include "lungcad/rng.hpp"
#include "lungcad/volume.hpp"

namespace lungcad {

// Mean of the radiologist scores when at least three raters scored the
// nodule, otherwise 1.
double nodule_malignancy_label(const std::vector<int>& scores);

enum class PatientLabel { kMalignant, kBenign, kExcluded };
const char* to_string(PatientLabel label);

// Malignant if any nodule with >= 3 scores averages >= 4; benign if there
// are no annotations or every such average is <= 2; excluded otherwise.
PatientLabel patient_label(const std::vector<NoduleAnnotation>& annotations);

struct ScalarLoss {
  double loss = 0.0;
  double grad = 0.0;
};

// |pred - target|, subgradient 0 at equality.
ScalarLoss mae_loss(double pred, double target);
// Mean over pairs; gradients are per element, already divided by n.
double mae_loss(const std::vector<double>& pred, const std::vector<double>& target, std::vector<double>* grad);

struct CurriculumConfig {
  int warmup_epochs = 50;
  double scored_fraction = 0.9;
};

struct CurriculumDraw {
  bool scored = true;
  std::size_t index = 0;
};

// Uniform draw from the scored pool during warm-up; afterwards from the
// scored pool with probability scored_fraction and from the unscored pool
// otherwise. An empty unscored pool always yields scored draws.
CurriculumDraw curriculum_sampler(int epoch, std::size_t scored_pool, std::size_t unscored_pool, Rng& rng,
                                  const CurriculumConfig& cfg = {});

// Attention head:
//   x_i = tanh(W1 h_i + b1)
//   y   = softmax_i(w2 . x_i + b2)
//   p   = sigmoid(w3 . sum_i y_i h_i + b3)
struct MilParams {
  Eigen::MatrixXd w1;  // A x F
  Eigen::VectorXd b1;  // A
  Eigen::VectorXd w2;  // A
  double b2 = 0.0;
  Eigen::VectorXd w3;  // F
  double b3 = 0.0;

  Eigen::Index feature_dim() const { return w1.cols(); }
  Eigen::Index attention_dim() const { return w1.rows(); }
  Eigen::Index parameter_count() const;
  void validate() const;

  Eigen::VectorXd flatten() const;
  void unflatten(const Eigen::VectorXd& theta);
};

inline constexpr Eigen::Index kDefaultAttentionDim = 128;

// Small Gaussian initialization, zero biases.
MilParams init_mil_params(Eigen::Index feature_dim, Eigen::Index attention_dim, Rng& rng);

struct AttentionCache {
  Eigen::MatrixXd h;    // k x F
  Eigen::MatrixXd x;    // A x k, post-tanh
  Eigen::VectorXd y;    // k
  Eigen::VectorXd z;    // F, pooled feature
  double logit = 0.0;
  double prob = 0.0;
};

struct AttentionOutput {
  double prob = 0.0;
  Eigen::VectorXd attention;
  AttentionCache cache;
};

AttentionOutput attention_forward(const Eigen::MatrixXd& h, const MilParams& p);

struct MilGrad {
  Eigen::MatrixXd w1;
  Eigen::VectorXd b1;
  Eigen::VectorXd w2;
  double b2 = 0.0;
  Eigen::VectorXd w3;
  double b3 = 0.0;
  Eigen::MatrixXd h;  // k x F

  Eigen::VectorXd flatten() const;
};

// Binary cross-entropy evaluated on the logit, so it is exact for
// saturated probabilities: softplus(logit) - label * logit.
double bce_from_logit(double logit, double label);

// Gradient of bce_from_logit(cache.logit, label), scaled by `scale`.
MilGrad attention_backward(const AttentionCache& cache, const MilParams& p, double label, double scale = 1.0);

double noisy_or(const std::vector<double>& probs);
// Noisy-OR over max(p_i, leak).
double leaky_noisy_or(const std::vector<double>& probs, double leak);
// (1/r) log(mean(exp(r p_i))), clamped to [0, 1].
double lse_combine(const std::vector<double>& probs, double r);

enum class MilPooling { kAttention, kNoisyOr, kLeakyNoisyOr, kLse };
MilPooling pooling_from_string(const std::string& s);

struct PoolingConfig {
  MilPooling pooling = MilPooling::kAttention;
  double leak = 0.01;
  double lse_r = 5.0;
};

// Per-instance probabilities sigmoid(w3 . h_i + b3).
Eigen::VectorXd instance_probabilities(const Eigen::MatrixXd& h, const MilParams& p);
double bag_probability(const Eigen::MatrixXd& h, const MilParams& p, const PoolingConfig& pooling = {});

// Per-feature affine standardization fitted on training instances.
struct FeatureStandardizer {
  Eigen::VectorXd mean;
  Eigen::VectorXd scale;  // 1 / std, with constant features mapped to 1

  static FeatureStandardizer fit(const std::vector<Eigen::MatrixXd>& bags);
  static FeatureStandardizer identity(Eigen::Index dim);
  Eigen::MatrixXd apply(const Eigen::MatrixXd& h) const;
};

struct MilTrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  int decay_every = 50;  // halve the learning rate every this many epochs
  int batch_size = 32;
  int epochs = 750;
  Eigen::Index attention_dim = kDefaultAttentionDim;
  double feature_dropout = 0.0;  // applied to bag features during training
  double dev_fraction = 0.0;     // held out for checkpoint selection
  int eval_every = 1;

  void validate() const;
};

// lr * 2^-floor(epoch / decay_every)
double mil_learning_rate(int epoch, const MilTrainConfig& cfg);

struct MilTrainResult {
  MilParams params;
  std::vector<double> loss_trace;  // mean training BCE per epoch
  std::vector<double> dev_trace;   // dev BCE at each evaluation, if any
  int selected_epoch = -1;         // last epoch, or best dev epoch
};

// Mini-batch SGD with momentum on the mean BCE. Bags with a label other
// than 0 or 1 are ignored.
MilTrainResult train_mil(const std::vector<Eigen::MatrixXd>& bags, const std::vector<int>& labels,
                         const MilTrainConfig& cfg, Rng& rng);

struct UncertainPrediction {
  double mean = 0.0;
  double stddev = 0.0;
};

// T forward passes with inverted dropout on the bag features.
UncertainPrediction mc_dropout_predict(const MilParams& p, const Eigen::MatrixXd& h, int samples, double rate,
                                       Rng& rng);

struct MilModel {
  MilParams params;
  FeatureStandardizer standardizer;
  PoolingConfig pooling;

  double predict(const Eigen::MatrixXd& raw_features) const;
};

// Arithmetic mean of member probabilities.
double ensemble_predict(const std::vector<MilModel>& models, const Eigen::MatrixXd& raw_features);
double ensemble_predict(const std::vector<MilParams>& models, const Eigen::MatrixXd& h);

void save_mil_models(const std::filesystem::path& path, const std::vector<MilModel>& models);
std::vector<MilModel> load_mil_models(const std::filesystem::path& path);

// Candidate ranking ------------------------------------------------------

// Indices of `candidates` ordered by descending score. Ties go to the higher
// max_score, then to the earlier center in raster (z, y, x) order, then to
// the lower index.
std::vector<std::size_t> rank_order(const std::vector<Candidate>& candidates, const std::vector<double>& scores);
std::vector<Candidate> rank_candidates(const std::vector<Candidate>& candidates, const std::vector<double>& scores);

// First k_each of each list, 1 mm first.
std::vector<Candidate> select_topk_dual(const std::vector<Candidate>& ranked_1mm,
                                        const std::vector<Candidate>& ranked_2mm, std::size_t k_each = 2);

// Per-candidate malignancy regression: the MIL head applied to one-instance
// bags with a linear output, w3 . h + b3.
struct RankerConfig {
  double learning_rate = 1e-4;
  int epochs = 750;
  int batch_size = 32;
  int steps_per_epoch = 0;  // 0: ceil(pool size / batch_size)
  CurriculumConfig curriculum;

  void validate() const;
};

struct RankerModel {
  MilParams params;
  FeatureStandardizer standardizer;

  double predict(const Eigen::VectorXd& raw_features) const;
};

struct RankerTrainResult {
  RankerModel model;
  std::vector<double> loss_trace;  // mean batch MAE per epoch
};

// `targets` are malignancy labels in [1, 5]; `scored[i]` marks items whose
// label came from at least three raters.
RankerTrainResult train_ranker(const std::vector<Eigen::VectorXd>& features, const std::vector<double>& targets,
                               const std::vector<bool>& scored, const RankerConfig& cfg, Rng& rng);

void save_ranker(const std::filesystem::path& path, const RankerModel& model);
RankerModel load_ranker(const std::filesystem::path& path);

}  // namespace lungcad
