#include "commands.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "config.hpp"
#include "json.hpp"
#include "lungcad/annotations.hpp"
#include "lungcad/csv.hpp"
#include "lungcad/metaimage.hpp"
#include "lungcad/preprocess.hpp"

namespace lungcad::cli {

namespace fs = std::filesystem;
using nlohmann::json;

PipelineConfig resolve_config(const CommonOptions& opt) {
  PipelineConfig cfg = opt.config ? load_config(*opt.config) : PipelineConfig{};
  if (opt.seed) cfg.seed = *opt.seed;
  if (opt.jobs) cfg.jobs = *opt.jobs;
  if (opt.threshold) cfg.cade.candidate_threshold = *opt.threshold;
  if (opt.scorer) cfg.cade.scorer = *opt.scorer;
  cfg.validate();
  return cfg;
}

namespace {

void write_json(const fs::path& path, const json& j) { csv::write_atomic(path, j.dump(2) + "\n"); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kParse, path.string() + ": " + e.what());
  }
}

json ci_json(const ConfidenceInterval& ci) {
  return {{"lo", ci.lo}, {"hi", ci.hi}, {"level", ci.level}, {"replicates", ci.replicates}};
}

std::vector<PatientCandidates> obtain_patients(const fs::path& manifest_path, const std::optional<fs::path>& detections,
                                               const PipelineConfig& cfg, DatasetManifest* manifest_out = nullptr) {
  DatasetManifest manifest = load_manifest(manifest_path);
  auto patients = detections ? load_detections(*detections, manifest)
                             : run_cade_dataset(manifest, cfg.cade, cfg.seed, cfg.jobs);
  if (manifest_out) *manifest_out = std::move(manifest);
  return patients;
}

std::vector<std::size_t> labeled(const std::vector<PatientCandidates>& patients) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < patients.size(); ++i)
    if (patients[i].label == 0 || patients[i].label == 1) idx.push_back(i);
  return idx;
}

// Stratified split of the labeled patients, as indices into `patients`.
DataSplit split_labeled(const std::vector<PatientCandidates>& patients, const PipelineConfig& cfg) {
  const auto idx = labeled(patients);
  std::vector<int> labels;
  for (std::size_t i : idx) labels.push_back(patients[i].label);
  const DataSplit local = split_patients(labels, cfg.cadx.test_fraction, cfg.seed);
  DataSplit s;
  for (std::size_t i : local.train) s.train.push_back(idx[i]);
  for (std::size_t i : local.test) s.test.push_back(idx[i]);
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

double operating_threshold(const std::vector<PatientCandidates>& patients, const std::vector<std::size_t>& train,
                           const std::optional<double>& fp_rate, const PipelineConfig& cfg) {
  return fp_rate ? threshold_for_fp_rate(patients, train, *fp_rate) : cfg.cade.candidate_threshold;
}

std::vector<std::size_t> resolve_ids(const std::vector<PatientCandidates>& patients,
                                     const std::vector<std::string>& ids) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < patients.size(); ++i) index[patients[i].patient_id] = i;
  std::vector<std::size_t> out;
  for (const auto& id : ids) {
    const auto it = index.find(id);
    require(it != index.end(), ErrorKind::kValidation, "model patient '" + id + "' is not in the manifest");
    out.push_back(it->second);
  }
  return out;
}

std::string auc_matrix_csv(const CouplingResult& r) {
  std::ostringstream out;
  out << "train_fp_per_scan";
  for (double f : r.fp_rates) out << ",test_" << csv::format_double(f);
  out << '\n';
  for (Eigen::Index i = 0; i < r.auc.rows(); ++i) {
    out << csv::format_double(r.fp_rates[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < r.auc.cols(); ++j) out << ',' << csv::format_double(r.auc(i, j));
    out << '\n';
  }
  return out.str();
}

}  // namespace

void cmd_phantom_gen(std::size_t n, const PipelineConfig& cfg, const fs::path& out) {
  require(n >= 1, ErrorKind::kValidation, "phantom-gen needs at least one patient");
  generate_dataset(n, cfg.phantom, derive_seed(cfg.seed, "phantom"), out, cfg.jobs);
  csv::write_atomic(out / "config.json", config_to_json(cfg));
}

void cmd_score(const std::vector<fs::path>& volumes, const PipelineConfig& cfg, const fs::path& out) {
  require(!volumes.empty(), ErrorKind::kValidation, "score needs at least one volume");
  fs::create_directories(out);
  const auto scorer = make_scorer(cfg.cade);
  for (const auto& path : volumes) {
    const CtVolume raw = load_metaimage(path);
    const CtVolume vol = normalize(resample(clip_hu(raw, cfg.cade.clip_lo, cfg.cade.clip_hi), cfg.cade.spacing));
    const ProbMap pm = score_volume(vol, *scorer, cfg.cade.tiling, cfg.jobs);
    save_metaimage(out / (path.stem().string() + ".prob.mhd"), pm, ElementType::kFloat);
  }
}

void cmd_extract(const fs::path& probmap, const std::string& patient_id, const PipelineConfig& cfg,
                 const fs::path& out) {
  const ProbMap pm = read_metaimage(probmap);
  auto cands = extract_candidates(pm, cfg.cade.candidate_threshold, patient_id);
  const Resolution res = resolution_of(pm.geometry());
  for (auto& c : cands) c.resolution = res;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_candidates_csv(out, cands);
}

void cmd_detect(const fs::path& manifest_path, const PipelineConfig& cfg, const fs::path& out) {
  const DatasetManifest manifest = load_manifest(manifest_path);
  const auto patients = run_cade_dataset(manifest, cfg.cade, cfg.seed, cfg.jobs);
  const auto extractor = make_feature_extractor(cfg.cade.extractor, derive_seed(cfg.seed, "features"));
  save_detections(out, patients, extractor->names());
}

void cmd_eval_froc(const fs::path& candidates, const fs::path& annotations, const std::optional<fs::path>& manifest,
                   Resolution resolution, const PipelineConfig& cfg, const fs::path& out) {
  const auto cands = load_candidates_csv(candidates);
  const auto nodules = load_annotations_csv(annotations);
  std::vector<std::string> ids;
  if (manifest) {
    for (const auto& e : load_manifest(*manifest).entries) ids.push_back(e.patient_id);
  } else {
    std::set<std::string> seen;
    for (const auto& n : nodules)
      if (seen.insert(n.patient_id).second) ids.push_back(n.patient_id);
    for (const auto& c : cands)
      if (seen.insert(c.patient_id).second) ids.push_back(c.patient_id);
  }
  std::map<std::string, std::size_t> index;
  std::vector<PatientDetections> patients(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    patients[i].patient_id = ids[i];
    index[ids[i]] = i;
  }
  for (const auto& n : nodules) {
    const auto it = index.find(n.patient_id);
    if (it != index.end()) patients[it->second].nodules.push_back(n);
  }
  for (const auto& c : cands) {
    if (c.resolution != resolution) continue;
    const auto it = index.find(c.patient_id);
    require(it != index.end(), ErrorKind::kValidation, "candidate for unknown patient '" + c.patient_id + "'");
    patients[it->second].centers_world.push_back(c.center_world);
    patients[it->second].scores.push_back(c.max_score);
  }

  const FrocCurve curve = froc(patients);
  const FrocEnvelope env = froc_bootstrap(patients, curve, derive_seed(cfg.seed, "froc-bootstrap"),
                                          cfg.eval.bootstrap, cfg.eval.level, cfg.jobs);
  fs::create_directories(out);
  save_froc_csv(out / "froc.csv", curve, &env);

  json ops = json::array();
  for (std::size_t k = 0; k < kCpmOperatingPoints.size(); ++k) {
    ops.push_back({{"fp_per_scan", kCpmOperatingPoints[k]},
                   {"sensitivity", sensitivity_at(curve, kCpmOperatingPoints[k])},
                   {"ci", ci_json(env.operating_points[k])}});
  }
  json bins = json::array();
  for (const auto& b : sensitivity_by_diameter(patients))
    bins.push_back({{"lo_mm", b.lo},
                    {"hi_mm", b.hi},
                    {"nodules", b.curve.n_nodules},
                    {"cpm", b.curve.empty() ? 0.0 : cpm(b.curve)}});
  write_json(out / "summary.json", {{"cpm", cpm(curve)},
                                    {"cpm_ci", ci_json(env.cpm)},
                                    {"patients", curve.n_patients},
                                    {"nodules", curve.n_nodules},
                                    {"resolution", to_string(resolution)},
                                    {"operating_points", ops},
                                    {"by_diameter", bins}});
}

void cmd_train_mil(const fs::path& manifest, const std::optional<fs::path>& detections, const PipelineConfig& cfg,
                   const fs::path& out) {
  const auto patients = obtain_patients(manifest, detections, cfg);
  const DataSplit split = split_labeled(patients, cfg);
  const double threshold = operating_threshold(patients, split.train, cfg.cadx.train_fp_rate, cfg);
  const CadxTrainReport report = train_cadx(patients, split.train, threshold, cfg.cadx, cfg.seed);

  fs::create_directories(out);
  save_ranker(out / "ranker.json", report.model.ranker);
  save_mil_models(out / "mil.json", report.model.members);
  json train_ids = json::array(), test_ids = json::array();
  for (std::size_t i : split.train) train_ids.push_back(patients[i].patient_id);
  for (std::size_t i : split.test) test_ids.push_back(patients[i].patient_id);
  write_json(out / "cadx.json", {{"format", "lungcad-cadx"},
                                 {"version", 1},
                                 {"k_each", report.model.k_each},
                                 {"train_threshold", report.model.train_threshold},
                                 {"selected_epochs", report.member_selected_epoch},
                                 {"train", train_ids},
                                 {"test", test_ids}});
  csv::write_atomic(out / "config.json", config_to_json(cfg));

  std::ostringstream loss;
  loss << "epoch";
  for (std::size_t m = 0; m < report.member_loss.size(); ++m) loss << ",member" << m;
  loss << ",ranker\n";
  std::size_t epochs = report.ranker_loss.size();
  for (const auto& l : report.member_loss) epochs = std::max(epochs, l.size());
  for (std::size_t e = 0; e < epochs; ++e) {
    loss << e;
    for (const auto& l : report.member_loss) loss << ',' << (e < l.size() ? csv::format_double(l[e]) : "");
    loss << ',' << (e < report.ranker_loss.size() ? csv::format_double(report.ranker_loss[e]) : "") << '\n';
  }
  csv::write_atomic(out / "loss.csv", loss.str());
}

double cmd_eval_roc(const fs::path& model_dir, const fs::path& manifest, const std::optional<fs::path>& detections,
                    const PipelineConfig& cfg, const fs::path& out) {
  const json meta = read_json(model_dir / "cadx.json");
  require(meta.value("format", "") == "lungcad-cadx", ErrorKind::kFormat, "not a CADx model directory");

  CadxModel model;
  model.ranker = load_ranker(model_dir / "ranker.json");
  model.members = load_mil_models(model_dir / "mil.json");
  std::vector<std::string> train_ids, test_ids;
  try {
    model.k_each = meta.at("k_each").get<std::size_t>();
    model.train_threshold = meta.at("train_threshold").get<double>();
    train_ids = meta.at("train").get<std::vector<std::string>>();
    test_ids = meta.at("test").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail(ErrorKind::kFormat, (model_dir / "cadx.json").string() + ": " + e.what());
  }

  const auto patients = obtain_patients(manifest, detections, cfg);
  const auto train = resolve_ids(patients, train_ids);
  const auto test = resolve_ids(patients, test_ids);
  const double threshold = operating_threshold(patients, train, cfg.cadx.test_fp_rate, cfg);
  const CadxEvaluation ev = evaluate_cadx(model, patients, test, threshold, cfg.cadx, cfg.eval, cfg.seed);

  fs::create_directories(out);
  save_roc_csv(out / "roc.csv", ev.roc);
  std::ostringstream pred;
  pred << "patient_id,label,prob,bag_size,mc_mean,mc_std\n";
  for (const auto& p : ev.predictions) {
    pred << p.patient_id << ',' << p.label << ',' << csv::format_double(p.prob) << ',' << p.bag_size << ','
         << csv::format_double(p.mc_mean) << ',' << csv::format_double(p.mc_std) << '\n';
  }
  csv::write_atomic(out / "predictions.csv", pred.str());
  std::ostringstream cal;
  cal << "lo,hi,count,mean_prob,frequency\n";
  for (const auto& b : ev.calibration.bins) {
    cal << csv::format_double(b.lo) << ',' << csv::format_double(b.hi) << ',' << b.count << ','
        << csv::format_double(b.mean_prob) << ',' << csv::format_double(b.frequency) << '\n';
  }
  csv::write_atomic(out / "calibration.csv", cal.str());
  write_json(out / "summary.json", {{"auc", ev.roc.auc},
                                    {"auc_ci", ci_json(ev.auc_ci)},
                                    {"member_auc", ev.member_auc},
                                    {"ece", ev.calibration.ece},
                                    {"test_patients", ev.predictions.size()},
                                    {"train_threshold", model.train_threshold},
                                    {"test_threshold", ev.test_threshold}});
  return ev.roc.auc;
}

CouplingResult cmd_experiment_coupling(const fs::path& manifest, const std::optional<fs::path>& detections,
                                       const PipelineConfig& cfg, const fs::path& out) {
  const auto patients = obtain_patients(manifest, detections, cfg);
  const DataSplit split = split_labeled(patients, cfg);
  const CouplingResult r =
      coupling_experiment(patients, split, cfg.eval.coupling_fp_rates, cfg.cadx, cfg.eval, cfg.seed);
  fs::create_directories(out);
  csv::write_atomic(out / "coupling.csv", auc_matrix_csv(r));
  std::ostringstream th;
  th << "fp_per_scan,threshold\n";
  for (std::size_t i = 0; i < r.fp_rates.size(); ++i)
    th << csv::format_double(r.fp_rates[i]) << ',' << csv::format_double(r.thresholds[i]) << '\n';
  csv::write_atomic(out / "thresholds.csv", th.str());
  return r;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kIo: return 3;
    case ErrorKind::kFormat:
    case ErrorKind::kUnsupportedFormat:
    case ErrorKind::kParse: return 4;
    case ErrorKind::kValidation:
    case ErrorKind::kDegenerateInput:
    case ErrorKind::kOutOfBounds:
    case ErrorKind::kEmptyBag: return 5;
    case ErrorKind::kConfiguration: return 6;
    case ErrorKind::kGeneration: return 7;
    case ErrorKind::kInternal: return 1;
  }
  return 1;
}

std::string error_line(const std::string& kind, const std::string& message) {
  return json{{"error", kind}, {"message", message}}.dump();
}

int run(int argc, char** argv) {
  CLI::App app{"Lung CT nodule detection and malignancy classification"};
  app.require_subcommand(1);
  CommonOptions common;
  std::string config_path;
  std::uint64_t seed = 0;
  int jobs = 1;
  double threshold = 0;
  std::string scorer;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--seed", seed, "root seed");
    cmd->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--threshold", threshold, "CADe candidate threshold")->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--scorer", scorer, "voxel scorer: blob or constant");
    cmd->add_option("--out", common.out, "output directory or file")->required();
  };

  std::size_t n = 0;
  auto* gen = app.add_subcommand("phantom-gen", "generate a synthetic phantom dataset");
  gen->add_option("-n,--patients", n, "number of patients")->required();
  add_common(gen);

  std::vector<fs::path> volumes;
  auto* score = app.add_subcommand("score", "score volumes into probability maps");
  score->add_option("volumes", volumes, ".mhd volumes")->required();
  add_common(score);

  fs::path probmap;
  std::string patient_id;
  auto* extract = app.add_subcommand("extract", "extract candidates from a probability map");
  extract->add_option("probmap", probmap, "probability map .mhd")->required();
  extract->add_option("--patient-id", patient_id, "patient id written to the CSV");
  add_common(extract);

  fs::path manifest;
  auto* detect = app.add_subcommand("detect", "run CADe over a manifest and cache candidates and features");
  detect->add_option("--manifest", manifest, "manifest.csv")->required();
  add_common(detect);

  fs::path candidates, annotations;
  std::optional<fs::path> froc_manifest;
  std::string resolution = "1mm";
  auto* efroc = app.add_subcommand("eval-froc", "FROC, CPM and bootstrap CIs for a candidate list");
  efroc->add_option("--candidates", candidates, "candidates CSV")->required();
  efroc->add_option("--annotations", annotations, "annotations CSV")->required();
  efroc->add_option("--manifest", froc_manifest, "patient list (defaults to ids in either file)")
      ;
  efroc->add_option("--resolution", resolution, "1mm or 2mm");
  add_common(efroc);

  std::optional<fs::path> detections;
  auto* train = app.add_subcommand("train-mil", "train the ranker and MIL ensemble");
  train->add_option("--manifest", manifest, "manifest.csv")->required();
  train->add_option("--detections", detections, "cmd detect output");
  add_common(train);

  fs::path model;
  auto* eroc = app.add_subcommand("eval-roc", "evaluate a trained model on its held-out patients");
  eroc->add_option("--model", model, "train-mil output")->required();
  eroc->add_option("--manifest", manifest, "manifest.csv")->required();
  eroc->add_option("--detections", detections, "cmd detect output");
  add_common(eroc);

  std::vector<double> fp_rates;
  auto* coupling = app.add_subcommand("experiment-coupling", "AUC over train x test CADe operating points");
  coupling->add_option("--manifest", manifest, "manifest.csv")->required();
  coupling->add_option("--detections", detections, "cmd detect output");
  coupling->add_option("--fp-rates", fp_rates, "FP/scan operating points")->delimiter(',');
  add_common(coupling);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << error_line("usage", e.what()) << '\n';
    return 2;
  }

  try {
    CLI::App* cmd = app.get_subcommands().front();
    if (!config_path.empty()) common.config = config_path;
    if (cmd->count("--seed")) common.seed = seed;
    if (cmd->count("--jobs")) common.jobs = jobs;
    if (cmd->count("--threshold")) common.threshold = threshold;
    if (cmd->count("--scorer")) common.scorer = scorer;
    PipelineConfig cfg = resolve_config(common);

    if (cmd == gen) {
      cmd_phantom_gen(n, cfg, common.out);
    } else if (cmd == score) {
      cmd_score(volumes, cfg, common.out);
    } else if (cmd == extract) {
      cmd_extract(probmap, patient_id.empty() ? probmap.stem().stem().string() : patient_id, cfg, common.out);
    } else if (cmd == detect) {
      cmd_detect(manifest, cfg, common.out);
    } else if (cmd == efroc) {
      Resolution res;
      try {
        res = resolution_from_string(resolution);
      } catch (const Error& e) {
        fail(ErrorKind::kConfiguration, e.what());
      }
      cmd_eval_froc(candidates, annotations, froc_manifest, res, cfg, common.out);
    } else if (cmd == train) {
      cmd_train_mil(manifest, detections, cfg, common.out);
    } else if (cmd == eroc) {
      cmd_eval_roc(model, manifest, detections, cfg, common.out);
    } else if (cmd == coupling) {
      if (!fp_rates.empty()) cfg.eval.coupling_fp_rates = fp_rates;
      cfg.eval.validate();
      cmd_experiment_coupling(manifest, detections, cfg, common.out);
    }
  } catch (const Error& e) {
    std::cerr << error_line(std::string(to_string(e.kind())), e.what()) << '\n';
    return exit_code(e.kind());
  } catch (const fs::filesystem_error& e) {
    std::cerr << error_line("io", e.what()) << '\n';
    return exit_code(ErrorKind::kIo);
  } catch (const std::exception& e) {
    std::cerr << error_line("internal", e.what()) << '\n';
    return exit_code(ErrorKind::kInternal);
  }
  return 0;
}

}  // namespace lungcad::cli
