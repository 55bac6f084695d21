#include "config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace lungcad::cli {

using nlohmann::json;

namespace {

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j_.is_object(), ErrorKind::kConfiguration, path_ + " must be an object");
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      require(seen_.count(key) > 0, ErrorKind::kConfiguration, "unknown config key '" + path_ + "." + key + "'");
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    if (const json* v = find(key)) {
      try {
        out = v->get<T>();
      } catch (const json::exception&) {
        fail(ErrorKind::kConfiguration, "config key '" + path_ + "." + key + "' has the wrong type");
      }
    }
  }

  void get(const std::string& key, Vec3& out) {
    std::vector<double> v;
    if (!find(key)) return;
    get(key, v);
    require(v.size() == 3, ErrorKind::kConfiguration, "config key '" + path_ + "." + key + "' needs 3 numbers");
    out = {v[0], v[1], v[2]};
  }

  void get(const std::string& key, Shape3& out) {
    std::vector<std::int64_t> v;
    if (!find(key)) return;
    get(key, v);
    require(v.size() == 3, ErrorKind::kConfiguration, "config key '" + path_ + "." + key + "' needs 3 integers");
    out = {v[0], v[1], v[2]};
  }

  void get(const std::string& key, std::optional<double>& out) {
    if (const json* v = find(key)) {
      if (v->is_null()) {
        out.reset();
      } else {
        double d = 0;
        get(key, d);
        out = d;
      }
    }
  }

  template <typename Fn>
  void section(const std::string& key, Fn&& fn) {
    if (const json* v = find(key)) {
      Section s(*v, path_ + "." + key);
      fn(s);
      s.finish();
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string pooling_name(MilPooling p) {
  switch (p) {
    case MilPooling::kAttention: return "attention";
    case MilPooling::kNoisyOr: return "noisy_or";
    case MilPooling::kLeakyNoisyOr: return "leaky_noisy_or";
    case MilPooling::kLse: return "lse";
  }
  return "attention";
}

json to_json(const Vec3& v) { return json::array({v.x, v.y, v.z}); }
json to_json(const Shape3& s) { return json::array({s.nx, s.ny, s.nz}); }
json to_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

PipelineConfig parse_config(const std::string& json_text, const std::string& source) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::kParse, source + ": " + e.what());
  }
  PipelineConfig c;
  Section root(doc, "config");
  root.get("seed", c.seed);
  root.get("jobs", c.jobs);
  root.section("phantom", [&](Section& s) {
    auto& p = c.phantom;
    s.get("shape", p.shape);
    s.get("spacing", p.spacing);
    s.get("origin", p.origin);
    s.get("background_hu", p.background_hu);
    s.get("background_sigma", p.background_sigma);
    s.get("min_nodules", p.min_nodules);
    s.get("max_nodules", p.max_nodules);
    s.get("min_diameter_mm", p.min_diameter_mm);
    s.get("max_diameter_mm", p.max_diameter_mm);
    s.get("diameter_power", p.diameter_power);
    s.get("nodule_hu", p.nodule_hu);
    s.get("nodule_hu_sd", p.nodule_hu_sd);
    s.get("edge_sigma_mm", p.edge_sigma_mm);
    s.get("border_mm", p.border_mm);
    s.get("min_vessels", p.min_vessels);
    s.get("max_vessels", p.max_vessels);
    s.get("min_vessel_radius_mm", p.min_vessel_radius_mm);
    s.get("max_vessel_radius_mm", p.max_vessel_radius_mm);
    s.get("min_vessel_length_mm", p.min_vessel_length_mm);
    s.get("max_vessel_length_mm", p.max_vessel_length_mm);
    s.get("vessel_clearance_mm", p.vessel_clearance_mm);
    s.get("malignant_diameter_mm", p.malignant_diameter_mm);
    s.get("min_raters", p.min_raters);
    s.get("max_raters", p.max_raters);
    s.get("max_retries", p.max_retries);
  });
  root.section("augment", [&](Section& s) {
    auto& a = c.augment;
    s.get("scale_sigma", a.scale_sigma);
    s.get("translate_sigma", a.translate_sigma);
    s.get("gamma_lo", a.gamma_lo);
    s.get("gamma_hi", a.gamma_hi);
    s.get("blur_sigma_max", a.blur_sigma_max);
    s.get("noise_sigma", a.noise_sigma);
    s.get("cade_scale_boost", a.cade_scale_boost);
    s.get("rotate", a.rotate);
    s.get("reflect", a.reflect);
    s.get("scale", a.scale);
    s.get("translate", a.translate);
    s.get("gamma", a.gamma);
    s.get("blur", a.blur);
    s.get("noise", a.noise);
  });
  root.section("preprocess", [&](Section& s) {
    s.get("spacing", c.cade.spacing);
    s.get("clip_lo", c.cade.clip_lo);
    s.get("clip_hi", c.cade.clip_hi);
  });
  root.section("tiling", [&](Section& s) {
    s.get("block_shape", c.cade.tiling.block_shape);
    s.get("margin", c.cade.tiling.margin);
  });
  root.section("scorer", [&](Section& s) {
    s.get("name", c.cade.scorer);
    s.get("radii_mm", c.cade.blob.radii_mm);
    s.get("threshold", c.cade.blob.threshold);
    s.get("steepness", c.cade.blob.steepness);
    s.get("constant_value", c.cade.constant_value);
  });
  root.section("candidates", [&](Section& s) {
    s.get("threshold", c.cade.candidate_threshold);
    s.get("dual_resolution", c.cade.dual_resolution);
    s.get("patch_size", c.cade.patch_size);
    s.get("extractor", c.cade.extractor);
  });
  root.section("ranker", [&](Section& s) {
    auto& r = c.cadx.ranker;
    s.get("learning_rate", r.learning_rate);
    s.get("epochs", r.epochs);
    s.get("batch_size", r.batch_size);
    s.get("steps_per_epoch", r.steps_per_epoch);
    s.get("warmup_epochs", r.curriculum.warmup_epochs);
    s.get("scored_fraction", r.curriculum.scored_fraction);
  });
  root.section("mil", [&](Section& s) {
    auto& m = c.cadx.mil;
    s.get("learning_rate", m.learning_rate);
    s.get("momentum", m.momentum);
    s.get("decay_every", m.decay_every);
    s.get("batch_size", m.batch_size);
    s.get("epochs", m.epochs);
    s.get("attention_dim", m.attention_dim);
    s.get("feature_dropout", m.feature_dropout);
    s.get("dev_fraction", m.dev_fraction);
    s.get("eval_every", m.eval_every);
    std::string pooling = pooling_name(c.cadx.pooling.pooling);
    s.get("pooling", pooling);
    try {
      c.cadx.pooling.pooling = pooling_from_string(pooling);
    } catch (const Error& e) {
      fail(ErrorKind::kConfiguration, e.what());
    }
    s.get("leak", c.cadx.pooling.leak);
    s.get("lse_r", c.cadx.pooling.lse_r);
    s.get("k_each", c.cadx.k_each);
    s.get("ensemble", c.cadx.ensemble);
    s.get("test_fraction", c.cadx.test_fraction);
    s.get("train_fp_rate", c.cadx.train_fp_rate);
    s.get("test_fp_rate", c.cadx.test_fp_rate);
    s.get("mc_samples", c.cadx.mc_samples);
    s.get("mc_rate", c.cadx.mc_rate);
  });
  root.section("eval", [&](Section& s) {
    s.get("bootstrap", c.eval.bootstrap);
    s.get("level", c.eval.level);
    s.get("calibration_bins", c.eval.calibration_bins);
    s.get("coupling_fp_rates", c.eval.coupling_fp_rates);
  });
  root.finish();
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string config_to_json(const PipelineConfig& c) {
  const auto& p = c.phantom;
  const auto& a = c.augment;
  const auto& r = c.cadx.ranker;
  const auto& m = c.cadx.mil;
  json j = {
      {"seed", c.seed},
      {"jobs", c.jobs},
      {"phantom",
       {{"shape", to_json(p.shape)},
        {"spacing", to_json(p.spacing)},
        {"origin", to_json(p.origin)},
        {"background_hu", p.background_hu},
        {"background_sigma", p.background_sigma},
        {"min_nodules", p.min_nodules},
        {"max_nodules", p.max_nodules},
        {"min_diameter_mm", p.min_diameter_mm},
        {"max_diameter_mm", p.max_diameter_mm},
        {"diameter_power", p.diameter_power},
        {"nodule_hu", p.nodule_hu},
        {"nodule_hu_sd", p.nodule_hu_sd},
        {"edge_sigma_mm", p.edge_sigma_mm},
        {"border_mm", p.border_mm},
        {"min_vessels", p.min_vessels},
        {"max_vessels", p.max_vessels},
        {"min_vessel_radius_mm", p.min_vessel_radius_mm},
        {"max_vessel_radius_mm", p.max_vessel_radius_mm},
        {"min_vessel_length_mm", p.min_vessel_length_mm},
        {"max_vessel_length_mm", p.max_vessel_length_mm},
        {"vessel_clearance_mm", p.vessel_clearance_mm},
        {"malignant_diameter_mm", p.malignant_diameter_mm},
        {"min_raters", p.min_raters},
        {"max_raters", p.max_raters},
        {"max_retries", p.max_retries}}},
      {"augment",
       {{"scale_sigma", a.scale_sigma},
        {"translate_sigma", a.translate_sigma},
        {"gamma_lo", a.gamma_lo},
        {"gamma_hi", a.gamma_hi},
        {"blur_sigma_max", a.blur_sigma_max},
        {"noise_sigma", a.noise_sigma},
        {"cade_scale_boost", a.cade_scale_boost},
        {"rotate", a.rotate},
        {"reflect", a.reflect},
        {"scale", a.scale},
        {"translate", a.translate},
        {"gamma", a.gamma},
        {"blur", a.blur},
        {"noise", a.noise}}},
      {"preprocess", {{"spacing", to_json(c.cade.spacing)}, {"clip_lo", c.cade.clip_lo}, {"clip_hi", c.cade.clip_hi}}},
      {"tiling", {{"block_shape", to_json(c.cade.tiling.block_shape)}, {"margin", c.cade.tiling.margin}}},
      {"scorer",
       {{"name", c.cade.scorer},
        {"radii_mm", c.cade.blob.radii_mm},
        {"threshold", c.cade.blob.threshold},
        {"steepness", c.cade.blob.steepness},
        {"constant_value", c.cade.constant_value}}},
      {"candidates",
       {{"threshold", c.cade.candidate_threshold},
        {"dual_resolution", c.cade.dual_resolution},
        {"patch_size", c.cade.patch_size},
        {"extractor", c.cade.extractor}}},
      {"ranker",
       {{"learning_rate", r.learning_rate},
        {"epochs", r.epochs},
        {"batch_size", r.batch_size},
        {"steps_per_epoch", r.steps_per_epoch},
        {"warmup_epochs", r.curriculum.warmup_epochs},
        {"scored_fraction", r.curriculum.scored_fraction}}},
      {"mil",
       {{"learning_rate", m.learning_rate},
        {"momentum", m.momentum},
        {"decay_every", m.decay_every},
        {"batch_size", m.batch_size},
        {"epochs", m.epochs},
        {"attention_dim", m.attention_dim},
        {"feature_dropout", m.feature_dropout},
        {"dev_fraction", m.dev_fraction},
        {"eval_every", m.eval_every},
        {"pooling", pooling_name(c.cadx.pooling.pooling)},
        {"leak", c.cadx.pooling.leak},
        {"lse_r", c.cadx.pooling.lse_r},
        {"k_each", c.cadx.k_each},
        {"ensemble", c.cadx.ensemble},
        {"test_fraction", c.cadx.test_fraction},
        {"train_fp_rate", to_json(c.cadx.train_fp_rate)},
        {"test_fp_rate", to_json(c.cadx.test_fp_rate)},
        {"mc_samples", c.cadx.mc_samples},
        {"mc_rate", c.cadx.mc_rate}}},
      {"eval",
       {{"bootstrap", c.eval.bootstrap},
        {"level", c.eval.level},
        {"calibration_bins", c.eval.calibration_bins},
        {"coupling_fp_rates", c.eval.coupling_fp_rates}}},
  };
  return j.dump(2) + "\n";
}

}  // namespace lungcad::cli
