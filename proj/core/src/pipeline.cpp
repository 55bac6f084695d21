#include "lungcad/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "lungcad/csv.hpp"
#include "lungcad/metaimage.hpp"
#include "lungcad/preprocess.hpp"

namespace lungcad {

void CadeConfig::validate() const {
  require(spacing.x > 0 && spacing.y > 0 && spacing.z > 0, ErrorKind::kConfiguration, "CADe spacing must be positive");
  require(clip_lo < clip_hi, ErrorKind::kConfiguration, "CADe clip range is empty");
  tiling.validate();
  if (scorer == "blob") blob.validate();
  require(scorer == "blob" || scorer == "constant", ErrorKind::kConfiguration, "unknown scorer '" + scorer + "'");
  require(constant_value >= 0 && constant_value <= 1, ErrorKind::kConfiguration, "constant score must lie in [0, 1]");
  require(candidate_threshold >= 0 && candidate_threshold <= 1, ErrorKind::kConfiguration,
          "candidate threshold must lie in [0, 1]");
  require(patch_size > 0, ErrorKind::kConfiguration, "patch size must be positive");
}

void CadxConfig::validate() const {
  ranker.validate();
  mil.validate();
  require(k_each >= 1 && ensemble >= 1, ErrorKind::kConfiguration, "k_each and ensemble size must be positive");
  require(test_fraction > 0 && test_fraction < 1, ErrorKind::kConfiguration, "test fraction must lie in (0, 1)");
  require(!train_fp_rate || *train_fp_rate > 0, ErrorKind::kConfiguration, "train FP rate must be positive");
  require(!test_fp_rate || *test_fp_rate > 0, ErrorKind::kConfiguration, "test FP rate must be positive");
  require(mc_samples >= 0 && mc_rate >= 0 && mc_rate < 1, ErrorKind::kConfiguration, "invalid MC dropout settings");
}

void EvalConfig::validate() const {
  require(bootstrap >= 1 && level > 0 && level < 1 && calibration_bins >= 1, ErrorKind::kConfiguration,
          "invalid evaluation settings");
  for (double r : coupling_fp_rates) require(r > 0, ErrorKind::kConfiguration, "coupling FP rates must be positive");
}

void PipelineConfig::validate() const {
  require(jobs >= 1, ErrorKind::kConfiguration, "jobs must be at least 1");
  phantom.validate();
  augment.validate();
  cade.validate();
  cadx.validate();
  eval.validate();
}

std::unique_ptr<VoxelScorer> make_scorer(const CadeConfig& cfg) {
  if (cfg.scorer == "blob") return reference_blob_scorer(cfg.blob);
  if (cfg.scorer == "constant") return std::make_unique<ConstantScorer>(cfg.constant_value);
  fail(ErrorKind::kConfiguration, "unknown scorer '" + cfg.scorer + "'");
}

namespace {

template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, jobs)), n);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

void detect(const CtVolume& volume, const std::string& patient_id, const CadeConfig& cfg, const VoxelScorer& scorer,
            const FeatureExtractor& extractor, int jobs, std::vector<Candidate>& out_c,
            std::vector<Eigen::VectorXd>& out_f) {
  const ProbMap pm = score_volume(volume, scorer, cfg.tiling, jobs);
  out_c = extract_candidates(pm, cfg.candidate_threshold, patient_id);
  const Resolution res = resolution_of(volume.geometry());
  out_f.clear();
  for (auto& c : out_c) {
    c.resolution = res;
    out_f.push_back(extractor.extract(extract_patch(volume, pm, c, cfg.patch_size)));
  }
}

}  // namespace

PatientCandidates run_cade(const CtVolume& raw, const std::string& patient_id, const CadeConfig& cfg,
                           const VoxelScorer& scorer, const FeatureExtractor& extractor, int jobs) {
  const CtVolume vol = normalize(resample(clip_hu(raw, cfg.clip_lo, cfg.clip_hi), cfg.spacing));
  PatientCandidates p;
  p.patient_id = patient_id;
  detect(vol, patient_id, cfg, scorer, extractor, jobs, p.candidates_1mm, p.features_1mm);
  if (cfg.dual_resolution) {
    const double coarse = 2.0 * std::min({cfg.spacing.x, cfg.spacing.y, cfg.spacing.z});
    CtVolume low = resample(vol, {coarse, coarse, coarse});
    low.normalized = true;
    detect(low, patient_id, cfg, scorer, extractor, jobs, p.candidates_2mm, p.features_2mm);
  }
  return p;
}

std::vector<PatientCandidates> run_cade_dataset(const DatasetManifest& manifest, const CadeConfig& cfg,
                                                std::uint64_t seed, int jobs) {
  cfg.validate();
  const auto scorer = make_scorer(cfg);
  const auto extractor = make_feature_extractor(cfg.extractor, derive_seed(seed, "features"));
  std::vector<PatientCandidates> out(manifest.entries.size());
  parallel_for(out.size(), jobs, [&](std::size_t i) {
    const auto& e = manifest.entries[i];
    out[i] = run_cade(load_metaimage(manifest.volume_path(e)), e.patient_id, cfg, *scorer, *extractor);
    out[i].label = e.label;
    out[i].nodules = manifest.annotations_for(e.patient_id);
  });
  return out;
}

std::vector<PatientCandidates> run_cade_phantoms(const PhantomConfig& phantom, std::size_t n_patients,
                                                 std::uint64_t phantom_seed, const CadeConfig& cfg,
                                                 std::uint64_t seed, int jobs) {
  cfg.validate();
  const auto scorer = make_scorer(cfg);
  const auto extractor = make_feature_extractor(cfg.extractor, derive_seed(seed, "features"));
  std::vector<PatientCandidates> out(n_patients);
  parallel_for(n_patients, jobs, [&](std::size_t i) {
    Phantom ph = generate_patient(phantom, phantom_seed, i);
    out[i] = run_cade(ph.volume, ph.patient_id, cfg, *scorer, *extractor);
    out[i].label = ph.label;
    out[i].nodules = std::move(ph.nodules);
  });
  return out;
}

void save_detections(const std::filesystem::path& dir, const std::vector<PatientCandidates>& patients,
                     const std::vector<std::string>& feature_names) {
  std::filesystem::create_directories(dir);
  std::vector<Candidate> all;
  std::ostringstream f;
  f << "patient_id,resolution";
  for (const auto& n : feature_names) f << ',' << n;
  f << '\n';
  for (const auto& p : patients) {
    auto emit = [&](const std::vector<Candidate>& cs, const std::vector<Eigen::VectorXd>& fs) {
      require(cs.size() == fs.size(), ErrorKind::kInternal, "candidate and feature counts differ");
      for (std::size_t i = 0; i < cs.size(); ++i) {
        require(fs[i].size() == static_cast<Eigen::Index>(feature_names.size()), ErrorKind::kInternal,
                "feature row length differs from the name list");
        all.push_back(cs[i]);
        all.back().patient_id = p.patient_id;
        f << p.patient_id << ',' << to_string(cs[i].resolution);
        for (double v : fs[i]) f << ',' << csv::format_double(v);
        f << '\n';
      }
    };
    emit(p.candidates_1mm, p.features_1mm);
    emit(p.candidates_2mm, p.features_2mm);
  }
  save_candidates_csv(dir / "candidates.csv", all);
  csv::write_atomic(dir / "features.csv", f.str());
}

std::vector<PatientCandidates> load_detections(const std::filesystem::path& dir, const DatasetManifest& manifest) {
  const auto cands = load_candidates_csv(dir / "candidates.csv");
  const auto feats = csv::read_file(dir / "features.csv");
  const std::string fpath = (dir / "features.csv").string();
  require(feats.header.size() >= 3 && feats.header[0] == "patient_id" && feats.header[1] == "resolution",
          ErrorKind::kParse, fpath + ": unexpected header");
  require(feats.rows.size() == cands.size(), ErrorKind::kParse, fpath + ": row count differs from candidates.csv");

  std::vector<PatientCandidates> out(manifest.entries.size());
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& e = manifest.entries[i];
    out[i].patient_id = e.patient_id;
    out[i].label = e.label;
    out[i].nodules = manifest.annotations_for(e.patient_id);
    index[e.patient_id] = i;
  }
  const std::size_t dim = feats.header.size() - 2;
  for (std::size_t r = 0; r < cands.size(); ++r) {
    const auto& [line, fields] = feats.rows[r];
    const auto& c = cands[r];
    require(fields.size() == dim + 2, ErrorKind::kParse, fpath + " row " + std::to_string(line) + ": wrong field count");
    require(fields[0] == c.patient_id && fields[1] == to_string(c.resolution), ErrorKind::kParse,
            fpath + " row " + std::to_string(line) + ": does not match candidates.csv");
    const auto it = index.find(c.patient_id);
    require(it != index.end(), ErrorKind::kValidation, "candidate for patient '" + c.patient_id + "' not in manifest");
    Eigen::VectorXd v(static_cast<Eigen::Index>(dim));
    for (std::size_t k = 0; k < dim; ++k)
      v[static_cast<Eigen::Index>(k)] = csv::parse_double(fields[k + 2], feats.header[k + 2], line);
    auto& p = out[it->second];
    if (c.resolution == Resolution::k1mm) {
      p.candidates_1mm.push_back(c);
      p.features_1mm.push_back(std::move(v));
    } else {
      p.candidates_2mm.push_back(c);
      p.features_2mm.push_back(std::move(v));
    }
  }
  return out;
}

DataSplit split_patients(const std::vector<int>& labels, double test_fraction, std::uint64_t seed) {
  require(test_fraction > 0 && test_fraction < 1, ErrorKind::kValidation, "test fraction must lie in (0, 1)");
  Rng rng(derive_seed(seed, "split"));
  std::vector<std::size_t> by_label[2];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    require(labels[i] == 0 || labels[i] == 1, ErrorKind::kValidation, "split needs 0/1 labels");
    by_label[labels[i]].push_back(i);
  }
  DataSplit s;
  for (auto& group : by_label) {
    std::shuffle(group.begin(), group.end(), rng.engine());
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(group.size())));
    s.test.insert(s.test.end(), group.begin(), group.begin() + static_cast<std::ptrdiff_t>(n_test));
    s.train.insert(s.train.end(), group.begin() + static_cast<std::ptrdiff_t>(n_test), group.end());
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

std::vector<PatientDetections> to_detections(const std::vector<PatientCandidates>& patients,
                                             const std::vector<std::size_t>& subset, Resolution resolution) {
  std::vector<PatientDetections> out;
  for (std::size_t i : subset) {
    const auto& p = patients.at(i);
    PatientDetections d;
    d.patient_id = p.patient_id;
    d.nodules = p.nodules;
    for (const auto& c : resolution == Resolution::k1mm ? p.candidates_1mm : p.candidates_2mm) {
      d.centers_world.push_back(c.center_world);
      d.scores.push_back(c.max_score);
    }
    out.push_back(std::move(d));
  }
  return out;
}

double threshold_for_fp_rate(const std::vector<PatientCandidates>& patients, const std::vector<std::size_t>& subset,
                             double fp_per_scan) {
  return threshold_at_fp_rate(froc(to_detections(patients, subset)), fp_per_scan);
}

namespace {

struct LabeledCandidate {
  double target = 1.0;
  bool scored = false;
};

LabeledCandidate label_candidate(const Candidate& c, const std::vector<NoduleAnnotation>& nodules) {
  const NoduleAnnotation* best = nullptr;
  double best_d = std::numeric_limits<double>::infinity();
  for (const auto& n : nodules) {
    const double d = distance(c.center_world, n.center_world);
    if (hit_test(c, n) && d < best_d) {
      best = &n;
      best_d = d;
    }
  }
  if (!best) return {};
  return {nodule_malignancy_label(best->radiologist_scores), best->radiologist_scores.size() >= 3};
}

std::vector<Candidate> ranked(const std::vector<Candidate>& cands, const std::vector<Eigen::VectorXd>& feats,
                              const RankerModel& ranker, double threshold, std::vector<Eigen::VectorXd>* ranked_feats) {
  std::vector<Candidate> kept;
  std::vector<Eigen::VectorXd> kept_f;
  std::vector<double> scores;
  for (std::size_t i = 0; i < cands.size(); ++i) {
    if (cands[i].max_score < threshold) continue;
    kept.push_back(cands[i]);
    kept_f.push_back(feats[i]);
    scores.push_back(ranker.predict(feats[i]));
  }
  const auto order = rank_order(kept, scores);
  std::vector<Candidate> out;
  for (std::size_t i : order) {
    out.push_back(kept[i]);
    if (ranked_feats) ranked_feats->push_back(kept_f[i]);
  }
  return out;
}

}  // namespace

Eigen::MatrixXd build_bag(const PatientCandidates& patient, const RankerModel& ranker, std::size_t k_each,
                          double candidate_threshold) {
  std::vector<Eigen::VectorXd> f1, f2;
  ranked(patient.candidates_1mm, patient.features_1mm, ranker, candidate_threshold, &f1);
  ranked(patient.candidates_2mm, patient.features_2mm, ranker, candidate_threshold, &f2);
  std::vector<Eigen::VectorXd> rows;
  for (std::size_t i = 0; i < std::min(k_each, f1.size()); ++i) rows.push_back(f1[i]);
  for (std::size_t i = 0; i < std::min(k_each, f2.size()); ++i) rows.push_back(f2[i]);
  const Eigen::Index dim = ranker.params.feature_dim();
  Eigen::MatrixXd bag(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t r = 0; r < rows.size(); ++r) bag.row(static_cast<Eigen::Index>(r)) = rows[r].transpose();
  return bag;
}

Eigen::MatrixXd fill_empty_bag(const Eigen::MatrixXd& bag, const FeatureStandardizer& standardizer) {
  if (bag.rows() > 0) return bag;
  return standardizer.mean.transpose();
}

CadxTrainReport train_cadx(const std::vector<PatientCandidates>& patients, const std::vector<std::size_t>& train,
                           double candidate_threshold, const CadxConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  require(!train.empty(), ErrorKind::kValidation, "CADx training needs patients");

  std::vector<Eigen::VectorXd> feats;
  std::vector<double> targets;
  std::vector<bool> scored;
  for (std::size_t i : train) {
    const auto& p = patients.at(i);
    auto add = [&](const std::vector<Candidate>& cs, const std::vector<Eigen::VectorXd>& fs) {
      for (std::size_t c = 0; c < cs.size(); ++c) {
        if (cs[c].max_score < candidate_threshold) continue;
        const auto l = label_candidate(cs[c], p.nodules);
        feats.push_back(fs[c]);
        targets.push_back(l.target);
        scored.push_back(l.scored);
      }
    };
    add(p.candidates_1mm, p.features_1mm);
    add(p.candidates_2mm, p.features_2mm);
  }
  require(!feats.empty(), ErrorKind::kValidation, "no training candidates pass the CADe threshold");

  CadxTrainReport report;
  Rng ranker_rng(derive_seed(seed, "ranker"));
  auto rr = train_ranker(feats, targets, scored, cfg.ranker, ranker_rng);
  report.model.ranker = rr.model;
  report.ranker_loss = std::move(rr.loss_trace);
  report.model.k_each = cfg.k_each;
  report.model.train_threshold = candidate_threshold;

  std::vector<Eigen::MatrixXd> bags;
  std::vector<int> labels;
  for (std::size_t i : train) {
    const auto& p = patients[i];
    if (p.label != 0 && p.label != 1) continue;
    bags.push_back(build_bag(p, report.model.ranker, cfg.k_each, candidate_threshold));
    labels.push_back(p.label);
  }
  std::vector<Eigen::MatrixXd> nonempty;
  for (const auto& b : bags)
    if (b.rows() > 0) nonempty.push_back(b);
  require(!nonempty.empty(), ErrorKind::kValidation, "every training bag is empty");
  const FeatureStandardizer standardizer = FeatureStandardizer::fit(nonempty);
  for (auto& b : bags) b = standardizer.apply(fill_empty_bag(b, standardizer));

  for (int m = 0; m < cfg.ensemble; ++m) {
    Rng rng(derive_seed(seed, "mil/member/" + std::to_string(m)));
    auto r = train_mil(bags, labels, cfg.mil, rng);
    report.model.members.push_back({std::move(r.params), standardizer, cfg.pooling});
    report.member_loss.push_back(std::move(r.loss_trace));
    report.member_selected_epoch.push_back(r.selected_epoch);
  }
  return report;
}

CadxEvaluation evaluate_cadx(const CadxModel& model, const std::vector<PatientCandidates>& patients,
                             const std::vector<std::size_t>& test, double candidate_threshold,
                             const CadxConfig& cadx, const EvalConfig& eval, std::uint64_t seed) {
  require(!model.members.empty(), ErrorKind::kValidation, "CADx model has no members");
  CadxEvaluation out;
  out.test_threshold = candidate_threshold;
  const auto& standardizer = model.members.front().standardizer;
  Rng mc_rng(derive_seed(seed, "mc-dropout"));
  std::vector<std::vector<double>> member_scores(model.members.size());
  for (std::size_t i : test) {
    const auto& p = patients.at(i);
    const Eigen::MatrixXd raw = build_bag(p, model.ranker, model.k_each, candidate_threshold);
    const Eigen::MatrixXd bag = fill_empty_bag(raw, standardizer);
    PatientPrediction pred;
    pred.patient_id = p.patient_id;
    pred.label = p.label;
    pred.bag_size = static_cast<std::size_t>(raw.rows());
    for (std::size_t m = 0; m < model.members.size(); ++m) {
      pred.member_probs.push_back(model.members[m].predict(bag));
      member_scores[m].push_back(pred.member_probs.back());
    }
    pred.prob = ensemble_predict(model.members, bag);
    if (cadx.mc_samples > 0) {
      const auto u = mc_dropout_predict(model.members.front().params, standardizer.apply(bag), cadx.mc_samples,
                                        cadx.mc_rate, mc_rng);
      pred.mc_mean = u.mean;
      pred.mc_std = u.stddev;
    }
    out.predictions.push_back(std::move(pred));
  }

  std::vector<double> probs;
  std::vector<int> labels;
  for (const auto& p : out.predictions) {
    probs.push_back(p.prob);
    labels.push_back(p.label);
  }
  out.roc = roc_curve(probs, labels);
  for (const auto& s : member_scores) out.member_auc.push_back(roc_auc(s, labels));
  out.calibration = calibration(probs, labels, eval.calibration_bins);
  out.auc_ci = bootstrap_ci(
      [&](const std::vector<std::size_t>& sample) -> std::optional<double> {
        std::vector<double> s;
        std::vector<int> l;
        bool pos = false, neg = false;
        for (std::size_t k : sample) {
          s.push_back(probs[k]);
          l.push_back(labels[k]);
          (labels[k] ? pos : neg) = true;
        }
        if (!pos || !neg) return std::nullopt;
        return roc_auc(s, l);
      },
      probs.size(), derive_seed(seed, "auc-bootstrap"), eval.bootstrap, eval.level);
  return out;
}

CouplingResult coupling_experiment(const std::vector<PatientCandidates>& patients, const DataSplit& split,
                                   const std::vector<double>& fp_rates, const CadxConfig& cadx,
                                   const EvalConfig& eval, std::uint64_t seed) {
  require(!fp_rates.empty(), ErrorKind::kValidation, "coupling needs at least one operating point");
  CouplingResult r;
  r.fp_rates = fp_rates;
  for (double f : fp_rates) r.thresholds.push_back(threshold_for_fp_rate(patients, split.train, f));
  const auto n = static_cast<Eigen::Index>(fp_rates.size());
  r.auc.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto model = train_cadx(patients, split.train, r.thresholds[static_cast<std::size_t>(i)], cadx, seed).model;
    for (Eigen::Index j = 0; j < n; ++j) {
      r.auc(i, j) =
          evaluate_cadx(model, patients, split.test, r.thresholds[static_cast<std::size_t>(j)], cadx, eval, seed).roc.auc;
    }
  }
  return r;
}

}  // namespace lungcad
