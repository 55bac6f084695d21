#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lungcad/volume.hpp"

namespace lungcad {

// Scored detections and ground truth for one scan.
struct PatientDetections {
  std::string patient_id;
  std::vector<Vec3> centers_world;
  std::vector<double> scores;
  std::vector<NoduleAnnotation> nodules;
};

struct FrocPoint {
  double threshold = 0.0;
  double fp_per_scan = 0.0;
  double sensitivity = 0.0;
  std::size_t detected = 0;
  std::size_t false_positives = 0;
};

struct FrocCurve {
  std::vector<FrocPoint> points;  // descending threshold
  std::size_t n_patients = 0;
  std::size_t n_nodules = 0;

  bool empty() const { return n_nodules == 0; }
};

// Sweeps every distinct candidate score as a threshold (score >= t survives).
// At each threshold surviving candidates are matched one-to-one to nodules
// they hit, greedily by increasing distance. Matched nodules count as
// detected; surviving candidates that hit no nodule count as false
// positives. Throws on zero patients or zero nodules.
FrocCurve froc(const std::vector<PatientDetections>& patients);

// Same sweep with sensitivity restricted to nodules accepted by `include`.
// Matching and false positives still consider every nodule. An empty
// selection returns an empty curve instead of throwing.
FrocCurve froc(const std::vector<PatientDetections>& patients,
               const std::function<bool(const NoduleAnnotation&)>& include);

inline const std::vector<double> kCpmOperatingPoints = {0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0};

// Sensitivity at `fp_per_scan`: upper envelope per distinct FP rate,
// linear interpolation in between, flat extrapolation at both ends.
double sensitivity_at(const FrocCurve& curve, double fp_per_scan);

// Mean sensitivity at the seven operating points.
double cpm(const FrocCurve& curve);

// Most permissive threshold whose FP rate does not exceed `fp_per_scan`.
// Falls back to the strictest threshold when every point exceeds it.
double threshold_at_fp_rate(const FrocCurve& curve, double fp_per_scan);

struct DiameterBin {
  double lo = 0.0;  // inclusive, mm
  double hi = 0.0;  // exclusive, mm
  FrocCurve curve;
};

std::vector<DiameterBin> sensitivity_by_diameter(const std::vector<PatientDetections>& patients,
                                                 const std::vector<std::pair<double, double>>& bins = {{3.0, 5.0},
                                                                                                        {5.0, 30.0}});

struct RocPoint {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // starts at (0, 0), ends at (1, 1)
  double auc = 0.0;
};

// Empirical ROC over distinct score thresholds and its trapezoidal area.
// Labels are 0/1; both classes must be present.
RocCurve roc_curve(const std::vector<double>& scores, const std::vector<int>& labels);
double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels);

struct ConfidenceInterval {
  double lo = 0.0;
  double hi = 0.0;
  double level = 0.95;
  std::size_t replicates = 0;
  std::vector<double> values;  // sorted replicate metrics
};

// A metric over a resample of patient indices (with repetition). Returns
// nullopt when undefined on that resample.
using ResampleMetric = std::function<std::optional<double>(const std::vector<std::size_t>&)>;

// Percentile bootstrap over patients, nearest-rank endpoints. Replicate b
// draws from its own generator stream derive_seed(seed, b), so results do
// not depend on `jobs`. Undefined replicates are redrawn; more than 10·B
// draws in total is a validation error.
ConfidenceInterval bootstrap_ci(const ResampleMetric& metric, std::size_t n_patients, std::uint64_t seed,
                                std::size_t replicates = 1000, double level = 0.95, int jobs = 1);

struct FrocEnvelope {
  std::vector<double> lo, hi;  // per curve point
  ConfidenceInterval cpm;
  std::vector<ConfidenceInterval> operating_points;  // sensitivities at the CPM FP rates
  double level = 0.95;
  std::size_t replicates = 0;
};

// Patient bootstrap of the curve's sensitivity at each original threshold,
// of CPM, and of the seven operating-point sensitivities. Per-point bounds
// are widened to contain the point estimate.
FrocEnvelope froc_bootstrap(const std::vector<PatientDetections>& patients, const FrocCurve& curve,
                            std::uint64_t seed, std::size_t replicates = 1000, double level = 0.95,
                            int jobs = 1);

struct CalibrationBin {
  double lo = 0.0, hi = 0.0;
  std::size_t count = 0;
  double mean_prob = 0.0;
  double frequency = 0.0;
};

struct Calibration {
  std::vector<CalibrationBin> bins;
  double ece = 0.0;
};

// Equal-width bins on [0, 1]; p = 1 falls in the last bin.
Calibration calibration(const std::vector<double>& probs, const std::vector<int>& labels, std::size_t n_bins = 10);

// `threshold,fp_per_scan,sensitivity[,lo,hi]`
void save_froc_csv(const std::filesystem::path& path, const FrocCurve& curve, const FrocEnvelope* envelope = nullptr);
FrocCurve load_froc_csv(const std::filesystem::path& path);
// `threshold,fpr,tpr`
void save_roc_csv(const std::filesystem::path& path, const RocCurve& curve);
RocCurve load_roc_csv(const std::filesystem::path& path);

}  // namespace lungcad
