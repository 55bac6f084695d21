#include "lungcad/mil.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "lungcad/csv.hpp"
#include "lungcad/nnet.hpp"
#include "lungcad/param_blob.hpp"

namespace lungcad {

double nodule_malignancy_label(const std::vector<int>& scores) {
  for (int s : scores) require(s >= 1 && s <= 5, ErrorKind::kValidation, "malignancy scores must lie in 1..5");
  if (scores.size() < 3) return 1.0;
  return std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
}

const char* to_string(PatientLabel label) {
  switch (label) {
    case PatientLabel::kMalignant: return "malignant";
    case PatientLabel::kBenign: return "benign";
    case PatientLabel::kExcluded: return "excluded";
  }
  return "excluded";
}

PatientLabel patient_label(const std::vector<NoduleAnnotation>& annotations) {
  if (annotations.empty()) return PatientLabel::kBenign;
  bool all_low = true;
  for (const auto& a : annotations) {
    if (a.radiologist_scores.size() < 3) continue;
    const double avg = nodule_malignancy_label(a.radiologist_scores);
    if (avg >= 4.0) return PatientLabel::kMalignant;
    if (avg > 2.0) all_low = false;
  }
  return all_low ? PatientLabel::kBenign : PatientLabel::kExcluded;
}

ScalarLoss mae_loss(double pred, double target) {
  const double d = pred - target;
  return {std::abs(d), d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0)};
}

double mae_loss(const std::vector<double>& pred, const std::vector<double>& target, std::vector<double>* grad) {
  require(pred.size() == target.size() && !pred.empty(), ErrorKind::kValidation,
          "MAE needs equally sized, non-empty inputs");
  const double n = static_cast<double>(pred.size());
  double total = 0.0;
  if (grad) grad->assign(pred.size(), 0.0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto l = mae_loss(pred[i], target[i]);
    total += l.loss;
    if (grad) (*grad)[i] = l.grad / n;
  }
  return total / n;
}

CurriculumDraw curriculum_sampler(int epoch, std::size_t scored_pool, std::size_t unscored_pool, Rng& rng,
                                  const CurriculumConfig& cfg) {
  require(scored_pool > 0, ErrorKind::kValidation, "curriculum sampling needs a non-empty scored pool");
  const bool scored = epoch < cfg.warmup_epochs || unscored_pool == 0 || rng.bernoulli(cfg.scored_fraction);
  const std::size_t pool = scored ? scored_pool : unscored_pool;
  return {scored, static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool) - 1))};
}

// Attention head ----------------------------------------------------------

Eigen::Index MilParams::parameter_count() const {
  return w1.size() + b1.size() + w2.size() + 1 + w3.size() + 1;
}

void MilParams::validate() const {
  require(w1.rows() > 0 && w1.cols() > 0 && b1.size() == w1.rows() && w2.size() == w1.rows() &&
              w3.size() == w1.cols(),
          ErrorKind::kValidation, "MIL parameter dimensions are inconsistent");
  require(w1.allFinite() && b1.allFinite() && w2.allFinite() && w3.allFinite() && std::isfinite(b2) &&
              std::isfinite(b3),
          ErrorKind::kValidation, "MIL parameters must be finite");
}

Eigen::VectorXd MilParams::flatten() const {
  Eigen::VectorXd t(parameter_count());
  Eigen::Index o = 0;
  t.segment(o, w1.size()) = Eigen::Map<const Eigen::VectorXd>(w1.data(), w1.size());
  o += w1.size();
  t.segment(o, b1.size()) = b1;
  o += b1.size();
  t.segment(o, w2.size()) = w2;
  o += w2.size();
  t[o++] = b2;
  t.segment(o, w3.size()) = w3;
  o += w3.size();
  t[o] = b3;
  return t;
}

void MilParams::unflatten(const Eigen::VectorXd& t) {
  require(t.size() == parameter_count(), ErrorKind::kValidation, "flat MIL parameter vector has the wrong length");
  Eigen::Index o = 0;
  w1 = Eigen::Map<const Eigen::MatrixXd>(t.data() + o, w1.rows(), w1.cols());
  o += w1.size();
  b1 = t.segment(o, b1.size());
  o += b1.size();
  w2 = t.segment(o, w2.size());
  o += w2.size();
  b2 = t[o++];
  w3 = t.segment(o, w3.size());
  o += w3.size();
  b3 = t[o];
}

Eigen::VectorXd MilGrad::flatten() const {
  MilParams shaped;
  shaped.w1 = w1;
  shaped.b1 = b1;
  shaped.w2 = w2;
  shaped.b2 = b2;
  shaped.w3 = w3;
  shaped.b3 = b3;
  return shaped.flatten();
}

MilParams init_mil_params(Eigen::Index feature_dim, Eigen::Index attention_dim, Rng& rng) {
  require(feature_dim > 0 && attention_dim > 0, ErrorKind::kValidation, "MIL dimensions must be positive");
  MilParams p;
  p.w1.resize(attention_dim, feature_dim);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(feature_dim));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(attention_dim));
  for (Eigen::Index i = 0; i < p.w1.size(); ++i) p.w1.data()[i] = rng.normal(0.0, s1);
  p.b1 = Eigen::VectorXd::Zero(attention_dim);
  p.w2.resize(attention_dim);
  for (Eigen::Index i = 0; i < attention_dim; ++i) p.w2[i] = rng.normal(0.0, s2);
  p.w3.resize(feature_dim);
  for (Eigen::Index i = 0; i < feature_dim; ++i) p.w3[i] = rng.normal(0.0, s1);
  return p;
}

namespace {

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

AttentionOutput attention_forward(const Eigen::MatrixXd& h, const MilParams& p) {
  require(h.rows() >= 1, ErrorKind::kEmptyBag, "attention needs at least one instance");
  require(h.cols() == p.feature_dim(), ErrorKind::kValidation, "bag feature dimension does not match the model");
  require(h.allFinite(), ErrorKind::kValidation, "bag features must be finite");
  AttentionOutput out;
  auto& c = out.cache;
  c.h = h;
  c.x = ((p.w1 * h.transpose()).colwise() + p.b1).array().tanh().matrix();
  Eigen::VectorXd s = (c.x.transpose() * p.w2).array() + p.b2;
  const double smax = s.maxCoeff();
  c.y = (s.array() - smax).exp().matrix();
  c.y /= c.y.sum();
  c.z = h.transpose() * c.y;
  c.logit = p.w3.dot(c.z) + p.b3;
  c.prob = sigmoid(c.logit);
  out.prob = c.prob;
  out.attention = c.y;
  return out;
}

double bce_from_logit(double logit, double label) {
  const double softplus = logit > 0 ? logit + std::log1p(std::exp(-logit)) : std::log1p(std::exp(logit));
  return softplus - label * logit;
}

MilGrad attention_backward(const AttentionCache& c, const MilParams& p, double label, double scale) {
  MilGrad g;
  const double dlogit = scale * (c.prob - label);
  g.b3 = dlogit;
  g.w3 = dlogit * c.z;
  const Eigen::VectorXd dz = dlogit * p.w3;
  const Eigen::VectorXd dy = c.h * dz;
  g.h = c.y * dz.transpose();
  const Eigen::VectorXd ds = c.y.cwiseProduct((dy.array() - c.y.dot(dy)).matrix());
  g.w2 = c.x * ds;
  g.b2 = ds.sum();
  const Eigen::MatrixXd dx = p.w2 * ds.transpose();
  const Eigen::MatrixXd dpre = dx.cwiseProduct((1.0 - c.x.array().square()).matrix());
  g.w1 = dpre * c.h;
  g.b1 = dpre.rowwise().sum();
  g.h += dpre.transpose() * p.w1;
  return g;
}

double noisy_or(const std::vector<double>& probs) {
  double keep = 1.0;
  for (double p : probs) keep *= 1.0 - std::clamp(p, 0.0, 1.0);
  return 1.0 - keep;
}

double leaky_noisy_or(const std::vector<double>& probs, double leak) {
  std::vector<double> q(probs);
  for (double& p : q) p = std::max(p, leak);
  return noisy_or(q);
}

double lse_combine(const std::vector<double>& probs, double r) {
  require(!probs.empty(), ErrorKind::kEmptyBag, "LSE pooling needs at least one probability");
  require(r > 0.0, ErrorKind::kValidation, "LSE sharpness must be positive");
  const double m = *std::max_element(probs.begin(), probs.end());
  double acc = 0.0;
  for (double p : probs) acc += std::exp(r * (p - m));
  return std::clamp(m + std::log(acc / static_cast<double>(probs.size())) / r, 0.0, 1.0);
}

MilPooling pooling_from_string(const std::string& s) {
  if (s == "attention") return MilPooling::kAttention;
  if (s == "noisy_or") return MilPooling::kNoisyOr;
  if (s == "leaky_noisy_or") return MilPooling::kLeakyNoisyOr;
  if (s == "lse") return MilPooling::kLse;
  fail(ErrorKind::kConfiguration, "unknown MIL pooling '" + s + "'");
}

namespace {

const char* pooling_name(MilPooling p) {
  switch (p) {
    case MilPooling::kAttention: return "attention";
    case MilPooling::kNoisyOr: return "noisy_or";
    case MilPooling::kLeakyNoisyOr: return "leaky_noisy_or";
    case MilPooling::kLse: return "lse";
  }
  return "attention";
}

}  // namespace

Eigen::VectorXd instance_probabilities(const Eigen::MatrixXd& h, const MilParams& p) {
  require(h.cols() == p.feature_dim(), ErrorKind::kValidation, "bag feature dimension does not match the model");
  Eigen::VectorXd logits = (h * p.w3).array() + p.b3;
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits[i] = sigmoid(logits[i]);
  return logits;
}

double bag_probability(const Eigen::MatrixXd& h, const MilParams& p, const PoolingConfig& pooling) {
  if (pooling.pooling == MilPooling::kAttention) return attention_forward(h, p).prob;
  require(h.rows() >= 1, ErrorKind::kEmptyBag, "pooling needs at least one instance");
  const Eigen::VectorXd q = instance_probabilities(h, p);
  const std::vector<double> v(q.data(), q.data() + q.size());
  switch (pooling.pooling) {
    case MilPooling::kNoisyOr: return noisy_or(v);
    case MilPooling::kLeakyNoisyOr: return leaky_noisy_or(v, pooling.leak);
    case MilPooling::kLse: return lse_combine(v, pooling.lse_r);
    case MilPooling::kAttention: break;
  }
  return attention_forward(h, p).prob;
}

FeatureStandardizer FeatureStandardizer::fit(const std::vector<Eigen::MatrixXd>& bags) {
  require(!bags.empty(), ErrorKind::kValidation, "cannot fit a standardizer without data");
  const Eigen::Index f = bags.front().cols();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(f), sq = Eigen::VectorXd::Zero(f);
  double n = 0;
  for (const auto& b : bags) {
    require(b.cols() == f, ErrorKind::kValidation, "inconsistent feature dimensions");
    sum += b.colwise().sum().transpose();
    n += static_cast<double>(b.rows());
  }
  require(n > 0, ErrorKind::kValidation, "cannot fit a standardizer without instances");
  FeatureStandardizer s;
  s.mean = sum / n;
  for (const auto& b : bags) sq += (b.rowwise() - s.mean.transpose()).array().square().colwise().sum().matrix().transpose();
  s.scale.resize(f);
  for (Eigen::Index j = 0; j < f; ++j) {
    const double sd = std::sqrt(sq[j] / n);
    s.scale[j] = sd > 1e-12 ? 1.0 / sd : 1.0;
  }
  return s;
}

FeatureStandardizer FeatureStandardizer::identity(Eigen::Index dim) {
  return {Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Ones(dim)};
}

Eigen::MatrixXd FeatureStandardizer::apply(const Eigen::MatrixXd& h) const {
  require(h.cols() == mean.size(), ErrorKind::kValidation, "feature dimension does not match the standardizer");
  return ((h.rowwise() - mean.transpose()).array().rowwise() * scale.transpose().array()).matrix();
}

// Training -----------------------------------------------------------------

void MilTrainConfig::validate() const {
  require(learning_rate > 0 && momentum >= 0 && momentum < 1 && decay_every > 0 && batch_size > 0 && epochs >= 0 &&
              attention_dim > 0 && feature_dropout >= 0 && feature_dropout < 1 && dev_fraction >= 0 &&
              dev_fraction < 1 && eval_every > 0,
          ErrorKind::kConfiguration, "invalid MIL training configuration");
}

double mil_learning_rate(int epoch, const MilTrainConfig& cfg) {
  return std::ldexp(cfg.learning_rate, -(epoch / cfg.decay_every));
}

namespace {

Eigen::MatrixXd dropout_features(const Eigen::MatrixXd& h, double rate, Rng& rng) {
  if (rate <= 0.0) return h;
  Eigen::MatrixXd out = h;
  const double keep = 1.0 / (1.0 - rate);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] *= rng.bernoulli(rate) ? 0.0 : keep;
  return out;
}

double mean_bce(const std::vector<Eigen::MatrixXd>& bags, const std::vector<int>& labels,
                const std::vector<std::size_t>& idx, const MilParams& p) {
  double total = 0.0;
  for (std::size_t i : idx) total += bce_from_logit(attention_forward(bags[i], p).cache.logit, labels[i]);
  return idx.empty() ? 0.0 : total / static_cast<double>(idx.size());
}

}  // namespace

MilTrainResult train_mil(const std::vector<Eigen::MatrixXd>& bags, const std::vector<int>& labels,
                         const MilTrainConfig& cfg, Rng& rng) {
  cfg.validate();
  require(bags.size() == labels.size(), ErrorKind::kValidation, "one label per bag is required");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < bags.size(); ++i) {
    if (labels[i] == 1) pos.push_back(i);
    if (labels[i] == 0) neg.push_back(i);
  }
  require(!pos.empty() || !neg.empty(), ErrorKind::kValidation, "MIL training needs at least one labeled bag");
  const Eigen::Index f = bags[pos.empty() ? neg.front() : pos.front()].cols();

  Rng split_rng = rng.fork();
  Rng init_rng = rng.fork();
  Rng shuffle_rng = rng.fork();
  Rng dropout_rng = rng.fork();

  // Stratified dev split.
  std::vector<std::size_t> train, dev;
  for (auto* cls : {&neg, &pos}) {
    std::shuffle(cls->begin(), cls->end(), split_rng.engine());
    const auto n_dev = static_cast<std::size_t>(std::floor(cfg.dev_fraction * static_cast<double>(cls->size())));
    dev.insert(dev.end(), cls->begin(), cls->begin() + static_cast<std::ptrdiff_t>(n_dev));
    train.insert(train.end(), cls->begin() + static_cast<std::ptrdiff_t>(n_dev), cls->end());
  }
  std::sort(train.begin(), train.end());
  std::sort(dev.begin(), dev.end());
  require(!train.empty(), ErrorKind::kValidation, "dev split leaves no training bags");

  MilTrainResult result;
  MilParams p = init_mil_params(f, cfg.attention_dim, init_rng);
  Eigen::VectorXd theta = p.flatten();
  nnet::SgdMomentum opt;
  opt.momentum = cfg.momentum;
  MilParams best = p;
  double best_dev = std::numeric_limits<double>::infinity();
  result.selected_epoch = cfg.epochs - 1;

  std::vector<std::size_t> order = train;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng.engine());
    const double lr = mil_learning_rate(epoch, cfg);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double scale = 1.0 / static_cast<double>(end - start);
      Eigen::VectorXd grad = Eigen::VectorXd::Zero(theta.size());
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t i = order[b];
        const Eigen::MatrixXd h = dropout_features(bags[i], cfg.feature_dropout, dropout_rng);
        const auto fwd = attention_forward(h, p);
        epoch_loss += bce_from_logit(fwd.cache.logit, labels[i]);
        grad += attention_backward(fwd.cache, p, labels[i], scale).flatten();
      }
      opt.step(theta, grad, lr);
      p.unflatten(theta);
    }
    result.loss_trace.push_back(epoch_loss / static_cast<double>(order.size()));
    if (!dev.empty() && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs)) {
      const double d = mean_bce(bags, labels, dev, p);
      result.dev_trace.push_back(d);
      if (d < best_dev) {
        best_dev = d;
        best = p;
        result.selected_epoch = epoch;
      }
    }
  }
  result.params = dev.empty() ? p : best;
  return result;
}

UncertainPrediction mc_dropout_predict(const MilParams& p, const Eigen::MatrixXd& h, int samples, double rate,
                                       Rng& rng) {
  require(samples >= 1, ErrorKind::kValidation, "MC dropout needs at least one sample");
  require(rate >= 0 && rate < 1, ErrorKind::kValidation, "dropout rate must lie in [0, 1)");
  std::vector<double> v;
  v.reserve(static_cast<std::size_t>(samples));
  for (int t = 0; t < samples; ++t) v.push_back(attention_forward(dropout_features(h, rate, rng), p).prob);
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(samples);
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  return {mean, std::sqrt(var / static_cast<double>(samples))};
}

double MilModel::predict(const Eigen::MatrixXd& raw_features) const {
  return bag_probability(standardizer.apply(raw_features), params, pooling);
}

double ensemble_predict(const std::vector<MilModel>& models, const Eigen::MatrixXd& raw_features) {
  require(!models.empty(), ErrorKind::kValidation, "ensemble needs at least one model");
  double acc = 0.0;
  for (const auto& m : models) acc += m.predict(raw_features);
  return acc / static_cast<double>(models.size());
}

double ensemble_predict(const std::vector<MilParams>& models, const Eigen::MatrixXd& h) {
  require(!models.empty(), ErrorKind::kValidation, "ensemble needs at least one model");
  double acc = 0.0;
  for (const auto& m : models) acc += attention_forward(h, m).prob;
  return acc / static_cast<double>(models.size());
}

// Serialization --------------------------------------------------------------

namespace {

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd from_entry(const ParamBlob::Entry& e) {
  return Eigen::Map<const Eigen::VectorXd>(e.values.data(), static_cast<Eigen::Index>(e.values.size()));
}

void put_head(ParamBlob& blob, const std::string& prefix, const MilParams& p, const FeatureStandardizer& s) {
  const auto a = static_cast<std::size_t>(p.attention_dim()), f = static_cast<std::size_t>(p.feature_dim());
  // w1 stored row-major [A, F].
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> w1 = p.w1;
  blob.put(prefix + "w1", {a, f}, std::vector<double>(w1.data(), w1.data() + w1.size()));
  blob.put(prefix + "b1", {a}, to_vec(p.b1));
  blob.put(prefix + "w2", {a}, to_vec(p.w2));
  blob.put(prefix + "b2", {1}, {p.b2});
  blob.put(prefix + "w3", {f}, to_vec(p.w3));
  blob.put(prefix + "b3", {1}, {p.b3});
  blob.put(prefix + "feature_mean", {f}, to_vec(s.mean));
  blob.put(prefix + "feature_scale", {f}, to_vec(s.scale));
}

void get_head(const ParamBlob& blob, const std::string& prefix, MilParams& p, FeatureStandardizer& s) {
  const auto& w1 = blob.get(prefix + "w1");
  require(w1.shape.size() == 2, ErrorKind::kFormat, "w1 must be a matrix");
  const auto a = static_cast<Eigen::Index>(w1.shape[0]), f = static_cast<Eigen::Index>(w1.shape[1]);
  p.w1 = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(w1.values.data(), a, f);
  p.b1 = from_entry(blob.get(prefix + "b1"));
  p.w2 = from_entry(blob.get(prefix + "w2"));
  p.b2 = blob.get(prefix + "b2").values.at(0);
  p.w3 = from_entry(blob.get(prefix + "w3"));
  p.b3 = blob.get(prefix + "b3").values.at(0);
  s.mean = from_entry(blob.get(prefix + "feature_mean"));
  s.scale = from_entry(blob.get(prefix + "feature_scale"));
  p.validate();
  require(s.mean.size() == f && s.scale.size() == f, ErrorKind::kFormat, "standardizer does not match the head");
}

}  // namespace

void save_mil_models(const std::filesystem::path& path, const std::vector<MilModel>& models) {
  require(!models.empty(), ErrorKind::kValidation, "nothing to save");
  ParamBlob blob;
  blob.meta["kind"] = "mil-ensemble";
  blob.meta["members"] = std::to_string(models.size());
  blob.meta["pooling"] = pooling_name(models.front().pooling.pooling);
  blob.meta["leak"] = csv::format_double(models.front().pooling.leak);
  blob.meta["lse_r"] = csv::format_double(models.front().pooling.lse_r);
  for (std::size_t m = 0; m < models.size(); ++m)
    put_head(blob, "member" + std::to_string(m) + ".", models[m].params, models[m].standardizer);
  save_param_blob(path, blob);
}

std::vector<MilModel> load_mil_models(const std::filesystem::path& path) {
  const ParamBlob blob = load_param_blob(path);
  require(blob.meta_value("kind") == "mil-ensemble", ErrorKind::kFormat, path.string() + " is not a MIL model");
  const auto n = std::stoul(blob.meta_value("members"));
  PoolingConfig pooling{pooling_from_string(blob.meta_value("pooling")), std::stod(blob.meta_value("leak")),
                        std::stod(blob.meta_value("lse_r"))};
  std::vector<MilModel> models(n);
  for (std::size_t m = 0; m < n; ++m) {
    get_head(blob, "member" + std::to_string(m) + ".", models[m].params, models[m].standardizer);
    models[m].pooling = pooling;
  }
  return models;
}

void save_ranker(const std::filesystem::path& path, const RankerModel& model) {
  ParamBlob blob;
  blob.meta["kind"] = "ranker";
  put_head(blob, "", model.params, model.standardizer);
  save_param_blob(path, blob);
}

RankerModel load_ranker(const std::filesystem::path& path) {
  const ParamBlob blob = load_param_blob(path);
  require(blob.meta_value("kind") == "ranker", ErrorKind::kFormat, path.string() + " is not a ranking model");
  RankerModel m;
  get_head(blob, "", m.params, m.standardizer);
  return m;
}

}  // namespace lungcad
