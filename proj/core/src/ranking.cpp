#include <algorithm>
#include <cmath>
#include <numeric>

#include "lungcad/mil.hpp"
#include "lungcad/nnet.hpp"

namespace lungcad {

std::vector<std::size_t> rank_order(const std::vector<Candidate>& candidates, const std::vector<double>& scores) {
  require(candidates.size() == scores.size(), ErrorKind::kValidation, "one score per candidate is required");
  std::vector<std::size_t> idx(candidates.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    const auto& ca = candidates[a];
    const auto& cb = candidates[b];
    if (ca.max_score != cb.max_score) return ca.max_score > cb.max_score;
    const Vec3 pa = ca.center_world, pb = cb.center_world;
    if (pa.z != pb.z) return pa.z < pb.z;
    if (pa.y != pb.y) return pa.y < pb.y;
    if (pa.x != pb.x) return pa.x < pb.x;
    return a < b;
  });
  return idx;
}

std::vector<Candidate> rank_candidates(const std::vector<Candidate>& candidates, const std::vector<double>& scores) {
  std::vector<Candidate> out;
  out.reserve(candidates.size());
  for (std::size_t i : rank_order(candidates, scores)) out.push_back(candidates[i]);
  return out;
}

std::vector<Candidate> select_topk_dual(const std::vector<Candidate>& ranked_1mm,
                                        const std::vector<Candidate>& ranked_2mm, std::size_t k_each) {
  require(!ranked_1mm.empty() || !ranked_2mm.empty(), ErrorKind::kEmptyBag, "both candidate lists are empty");
  std::vector<Candidate> bag;
  for (std::size_t i = 0; i < std::min(k_each, ranked_1mm.size()); ++i) bag.push_back(ranked_1mm[i]);
  for (std::size_t i = 0; i < std::min(k_each, ranked_2mm.size()); ++i) bag.push_back(ranked_2mm[i]);
  require(!bag.empty(), ErrorKind::kEmptyBag, "bag size must be positive");
  return bag;
}

void RankerConfig::validate() const {
  require(learning_rate > 0 && epochs >= 0 && batch_size > 0 && steps_per_epoch >= 0, ErrorKind::kConfiguration,
          "invalid ranker training configuration");
}

double RankerModel::predict(const Eigen::VectorXd& raw_features) const {
  const Eigen::MatrixXd h = standardizer.apply(raw_features.transpose());
  return params.w3.dot(h.row(0).transpose()) + params.b3;
}

RankerTrainResult train_ranker(const std::vector<Eigen::VectorXd>& features, const std::vector<double>& targets,
                               const std::vector<bool>& scored, const RankerConfig& cfg, Rng& rng) {
  cfg.validate();
  require(!features.empty() && features.size() == targets.size() && features.size() == scored.size(),
          ErrorKind::kValidation, "ranker training needs one target and flag per item");
  std::vector<std::size_t> scored_pool, unscored_pool;
  for (std::size_t i = 0; i < features.size(); ++i) (scored[i] ? scored_pool : unscored_pool).push_back(i);
  // Without any scored item the curriculum degenerates to uniform sampling.
  if (scored_pool.empty()) std::swap(scored_pool, unscored_pool);

  std::vector<Eigen::MatrixXd> rows;
  rows.reserve(features.size());
  for (const auto& f : features) rows.emplace_back(f.transpose());
  RankerTrainResult result;
  result.model.standardizer = FeatureStandardizer::fit(rows);
  const Eigen::Index dim = features.front().size();
  std::vector<Eigen::VectorXd> h;
  h.reserve(features.size());
  for (const auto& r : rows) h.emplace_back(result.model.standardizer.apply(r).row(0).transpose());

  Rng init_rng = rng.fork();
  Rng draw_rng = rng.fork();
  MilParams& p = result.model.params;
  p = init_mil_params(dim, 1, init_rng);
  p.w3.setZero();
  // Start from the mean scored target so Adam only has to learn the slope.
  double mean_target = 0.0;
  for (std::size_t i : scored_pool) mean_target += targets[i];
  p.b3 = mean_target / static_cast<double>(scored_pool.size());

  Eigen::VectorXd theta(dim + 1);
  theta << p.w3, p.b3;
  nnet::Adam opt;
  const int steps = cfg.steps_per_epoch > 0
                        ? cfg.steps_per_epoch
                        : static_cast<int>((features.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                           static_cast<std::size_t>(cfg.batch_size));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (int s = 0; s < steps; ++s) {
      Eigen::VectorXd grad = Eigen::VectorXd::Zero(dim + 1);
      double batch_loss = 0.0;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const auto d = curriculum_sampler(epoch, scored_pool.size(), unscored_pool.size(), draw_rng, cfg.curriculum);
        const std::size_t i = d.scored ? scored_pool[d.index] : unscored_pool[d.index];
        const double pred = theta.head(dim).dot(h[i]) + theta[dim];
        const auto l = mae_loss(pred, targets[i]);
        batch_loss += l.loss;
        grad.head(dim) += l.grad * h[i];
        grad[dim] += l.grad;
      }
      grad /= static_cast<double>(cfg.batch_size);
      opt.step(theta, grad, cfg.learning_rate);
      epoch_loss += batch_loss / static_cast<double>(cfg.batch_size);
    }
    result.loss_trace.push_back(steps > 0 ? epoch_loss / steps : 0.0);
  }
  p.w3 = theta.head(dim);
  p.b3 = theta[dim];
  return result;
}

}  // namespace lungcad
