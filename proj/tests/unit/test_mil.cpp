#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lungcad/mil.hpp"
#include "test_util.hpp"

namespace lungcad {
namespace {

Eigen::MatrixXd random_bag(Rng& r, Eigen::Index k, Eigen::Index f) {
  Eigen::MatrixXd h(k, f);
  for (auto& v : h.reshaped()) v = r.normal(0, 1);
  return h;
}

MilParams random_params(Rng& r, Eigen::Index f, Eigen::Index a) {
  MilParams p = init_mil_params(f, a, r);
  // Larger weights than the default init so the check is not dominated by
  // near-linear regimes.
  for (auto& v : p.w1.reshaped()) v = r.normal(0, 0.5);
  for (auto& v : p.b1) v = r.normal(0, 0.5);
  for (auto& v : p.w2) v = r.normal(0, 0.5);
  for (auto& v : p.w3) v = r.normal(0, 0.5);
  p.b2 = r.normal(0, 0.5);
  p.b3 = r.normal(0, 0.5);
  return p;
}

TEST(MalignancyLabel, Examples) {
  EXPECT_NEAR(nodule_malignancy_label({5, 5, 4}), 14.0 / 3.0, 1e-12);
  EXPECT_EQ(nodule_malignancy_label({3, 3}), 1.0);
  EXPECT_EQ(nodule_malignancy_label({}), 1.0);
  EXPECT_EQ(nodule_malignancy_label({1, 2, 3, 4}), 2.5);
}

TEST(PatientLabel, Rules) {
  auto nod = [](std::vector<int> s) { return NoduleAnnotation{"p", {}, 8.0, std::move(s)}; };
  EXPECT_EQ(patient_label({}), PatientLabel::kBenign);
  EXPECT_EQ(patient_label({nod({2, 2, 1}), nod({5, 4, 4})}), PatientLabel::kMalignant);
  EXPECT_EQ(patient_label({nod({2, 2, 2}), nod({1, 1})}), PatientLabel::kBenign);
  EXPECT_EQ(patient_label({nod({3, 3, 3})}), PatientLabel::kExcluded);
  // Under-scored nodules do not decide the label.
  EXPECT_EQ(patient_label({nod({5, 5})}), PatientLabel::kBenign);
}

TEST(MaeLoss, ValueAndSubgradient) {
  EXPECT_EQ(mae_loss(3.0, 1.0).loss, 2.0);
  EXPECT_EQ(mae_loss(3.0, 1.0).grad, 1.0);
  EXPECT_EQ(mae_loss(0.0, 1.0).grad, -1.0);
  EXPECT_EQ(mae_loss(1.0, 1.0).grad, 0.0);
  std::vector<double> g;
  EXPECT_EQ(mae_loss({1, 2, 4}, {2, 2, 2}, &g), 1.0);
  EXPECT_EQ(g, (std::vector<double>{-1.0 / 3, 0.0, 1.0 / 3}));
}

TEST(Curriculum, WarmupOnlyScoredThenMixture) {
  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    const auto d = curriculum_sampler(10, 5, 7, r);
    ASSERT_TRUE(d.scored);
    ASSERT_LT(d.index, 5u);
  }
  int scored = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const auto d = curriculum_sampler(60, 5, 7, r);
    scored += d.scored;
    ASSERT_LT(d.index, d.scored ? 5u : 7u);
  }
  EXPECT_NEAR(double(scored) / n, 0.9, 0.01);
  for (int i = 0; i < 100; ++i) EXPECT_TRUE(curriculum_sampler(60, 5, 0, r).scored);
}

TEST(Attention, SingleInstanceHasUnitWeight) {
  Rng r(2);
  const auto p = random_params(r, 8, 4);
  const auto h = random_bag(r, 1, 8);
  const auto out = attention_forward(h, p);
  EXPECT_DOUBLE_EQ(out.attention[0], 1.0);
  EXPECT_NEAR(out.prob, 1.0 / (1.0 + std::exp(-(p.w3.dot(h.row(0).transpose()) + p.b3))), 1e-12);
}

TEST(Attention, WeightsSumToOneAndArePermutationInvariant) {
  Rng r(3);
  for (int t = 0; t < 50; ++t) {
    const auto p = random_params(r, 6, 5);
    const auto h = random_bag(r, 5, 6);
    const auto out = attention_forward(h, p);
    EXPECT_NEAR(out.attention.sum(), 1.0, 1e-12);
    std::vector<int> perm(5);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), r.engine());
    Eigen::MatrixXd hp(5, 6);
    for (int i = 0; i < 5; ++i) hp.row(i) = h.row(perm[i]);
    const auto outp = attention_forward(hp, p);
    EXPECT_NEAR(outp.prob, out.prob, 1e-12);
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(outp.attention[i], out.attention[perm[i]], 1e-12);
  }
}

TEST(Attention, GradientMatchesFiniteDifferences) {
  Rng r(4);
  for (int t = 0; t < 10; ++t) {
    const Eigen::Index f = 4, a = 3, k = 3;
    MilParams p = random_params(r, f, a);
    const Eigen::MatrixXd h = random_bag(r, k, f);
    const double label = t % 2;
    const auto cache = attention_forward(h, p).cache;
    const MilGrad g = attention_backward(cache, p, label);
    const Eigen::VectorXd analytic = g.flatten();
    const Eigen::VectorXd theta = p.flatten();
    const double step = 1e-6;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      MilParams pp = p, pm = p;
      Eigen::VectorXd tp = theta, tm = theta;
      tp[i] += step;
      tm[i] -= step;
      pp.unflatten(tp);
      pm.unflatten(tm);
      const double fd = (bce_from_logit(attention_forward(h, pp).cache.logit, label) -
                         bce_from_logit(attention_forward(h, pm).cache.logit, label)) /
                        (2 * step);
      EXPECT_NEAR(fd, analytic[i], 1e-7 * std::max(1.0, std::abs(fd)));
    }
    for (Eigen::Index i = 0; i < h.size(); ++i) {
      Eigen::MatrixXd hp = h, hm = h;
      hp.reshaped()[i] += step;
      hm.reshaped()[i] -= step;
      const double fd = (bce_from_logit(attention_forward(hp, p).cache.logit, label) -
                         bce_from_logit(attention_forward(hm, p).cache.logit, label)) /
                        (2 * step);
      EXPECT_NEAR(fd, g.h.reshaped()[i], 1e-7 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST(Attention, EmptyBagIsRejected) {
  Rng r(5);
  const auto p = random_params(r, 3, 2);
  EXPECT_THROW(attention_forward(Eigen::MatrixXd(0, 3), p), Error);
  EXPECT_THROW(attention_forward(Eigen::MatrixXd(2, 4), p), Error);
}

TEST(BceFromLogit, StableAndExact) {
  EXPECT_NEAR(bce_from_logit(0.0, 1.0), std::log(2.0), 1e-15);
  EXPECT_NEAR(bce_from_logit(800.0, 0.0), 800.0, 1e-9);
  EXPECT_NEAR(bce_from_logit(800.0, 1.0), 0.0, 1e-12);
  EXPECT_TRUE(std::isfinite(bce_from_logit(-800.0, 1.0)));
}

TEST(Pooling, NoisyOrExamples) {
  EXPECT_NEAR(noisy_or({0.5, 0.5}), 0.75, 1e-15);
  EXPECT_EQ(noisy_or({0.0, 0.0, 0.0}), 0.0);
  EXPECT_EQ(noisy_or({1.0, 0.2}), 1.0);
  EXPECT_NEAR(leaky_noisy_or({0.0, 0.0}, 0.1), 0.19, 1e-15);
}

TEST(Pooling, NoisyOrMatchesInclusionExclusion) {
  Rng r(6);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = std::size_t(r.uniform_int(1, 5));
    std::vector<double> p(n);
    for (double& v : p) v = r.uniform(0, 1);
    // P(at least one) by summing over every subset of positives.
    double at_least_one = 0;
    for (std::size_t mask = 1; mask < (1u << n); ++mask) {
      double pr = 1;
      for (std::size_t i = 0; i < n; ++i) pr *= (mask >> i & 1u) ? p[i] : 1 - p[i];
      at_least_one += pr;
    }
    EXPECT_NEAR(noisy_or(p), at_least_one, 1e-12);
  }
}

TEST(Pooling, LseLimits) {
  const std::vector<double> p = {0.1, 0.7, 0.3};
  EXPECT_NEAR(lse_combine(p, 100.0), 0.7, 0.02);
  EXPECT_NEAR(lse_combine(p, 1e-6), (0.1 + 0.7 + 0.3) / 3, 1e-6);
  EXPECT_NEAR(lse_combine({0.4, 0.4}, 5.0), 0.4, 1e-12);
}

TEST(Pooling, FromString) {
  EXPECT_EQ(pooling_from_string("attention"), MilPooling::kAttention);
  EXPECT_EQ(pooling_from_string("noisy_or"), MilPooling::kNoisyOr);
  EXPECT_THROW(pooling_from_string("max"), Error);
}

TEST(Standardizer, ZeroMeanUnitVariance) {
  Rng r(7);
  std::vector<Eigen::MatrixXd> bags;
  for (int i = 0; i < 10; ++i) {
    Eigen::MatrixXd b = random_bag(r, 3, 2);
    b.col(0) = b.col(0).array() * 5 + 2;
    b.col(1).setConstant(4);
    bags.push_back(b);
  }
  const auto s = FeatureStandardizer::fit(bags);
  Eigen::MatrixXd all(30, 2);
  for (int i = 0; i < 10; ++i) all.middleRows(3 * i, 3) = s.apply(bags[i]);
  EXPECT_NEAR(all.col(0).mean(), 0.0, 1e-12);
  EXPECT_NEAR((all.col(0).array() - all.col(0).mean()).square().mean(), 1.0, 1e-9);
  for (double v : all.col(1)) EXPECT_EQ(v, 0.0);
}

TEST(TrainMil, MemorizesOneBag) {
  Rng r(8);
  const std::vector<Eigen::MatrixXd> bags = {random_bag(r, 3, 4)};
  MilTrainConfig cfg;
  cfg.epochs = 300;
  cfg.decay_every = 1000;
  cfg.attention_dim = 8;
  cfg.batch_size = 1;
  Rng tr(9);
  const auto res = train_mil(bags, {1}, cfg, tr);
  EXPECT_LT(bce_from_logit(attention_forward(bags[0], res.params).cache.logit, 1.0), 0.05);
  EXPECT_EQ(res.loss_trace.size(), 300u);
  EXPECT_LT(res.loss_trace.back(), res.loss_trace.front());
}

TEST(TrainMil, SeparatesTwoClassesAndIsDeterministic) {
  Rng r(10);
  std::vector<Eigen::MatrixXd> bags;
  std::vector<int> labels;
  for (int i = 0; i < 40; ++i) {
    Eigen::MatrixXd b = random_bag(r, 4, 3);
    const int y = i % 2;
    if (y) b(r.uniform_int(0, 3), 0) += 4.0;
    bags.push_back(b);
    labels.push_back(y);
  }
  MilTrainConfig cfg;
  cfg.epochs = 100;
  cfg.attention_dim = 8;
  cfg.batch_size = 8;
  Rng a(11), b(11);
  const auto x = train_mil(bags, labels, cfg, a);
  const auto y = train_mil(bags, labels, cfg, b);
  EXPECT_EQ(x.params.flatten(), y.params.flatten());
  EXPECT_EQ(x.loss_trace, y.loss_trace);
  int correct = 0;
  for (std::size_t i = 0; i < bags.size(); ++i)
    correct += (bag_probability(bags[i], x.params) > 0.5) == (labels[i] == 1);
  EXPECT_GE(correct, 36);
}

TEST(TrainMil, LearningRateSchedule) {
  MilTrainConfig cfg;
  EXPECT_EQ(mil_learning_rate(0, cfg), 0.01);
  EXPECT_EQ(mil_learning_rate(49, cfg), 0.01);
  EXPECT_EQ(mil_learning_rate(50, cfg), 0.005);
  EXPECT_EQ(mil_learning_rate(120, cfg), 0.0025);
}

TEST(McDropout, ZeroRateHasNoSpread) {
  Rng r(12);
  const auto p = random_params(r, 5, 3);
  const auto h = random_bag(r, 3, 5);
  Rng d(1);
  const auto u = mc_dropout_predict(p, h, 20, 0.0, d);
  EXPECT_NEAR(u.mean, attention_forward(h, p).prob, 1e-12);
  EXPECT_NEAR(u.stddev, 0.0, 1e-12);
  const auto v = mc_dropout_predict(p, h, 50, 0.5, d);
  EXPECT_GT(v.stddev, 0.0);
}

TEST(Ensemble, MeanOfMembers) {
  Rng r(13);
  const auto h = random_bag(r, 2, 4);
  std::vector<MilParams> ms = {random_params(r, 4, 2), random_params(r, 4, 2), random_params(r, 4, 2)};
  double mean = 0;
  for (const auto& m : ms) mean += attention_forward(h, m).prob / 3.0;
  EXPECT_NEAR(ensemble_predict(ms, h), mean, 1e-12);
}

Candidate cand(double score, double z) {
  Candidate c;
  c.patient_id = "p";
  c.center_world = {0, 0, z};
  c.max_score = score;
  return c;
}

TEST(Ranking, OrderAndTieBreaks) {
  const std::vector<Candidate> c = {cand(0.5, 3), cand(0.9, 2), cand(0.5, 1), cand(0.7, 0)};
  EXPECT_EQ(rank_order(c, {0.2, 0.8, 0.2, 0.2}), (std::vector<std::size_t>{1, 3, 2, 0}));
  EXPECT_EQ(rank_order(c, {1, 1, 1, 1}), (std::vector<std::size_t>{1, 3, 2, 0}));
}

TEST(Ranking, TopKDualSizes) {
  auto list = [](std::size_t n) { return std::vector<Candidate>(n, cand(0.5, 0)); };
  EXPECT_EQ(select_topk_dual(list(3), list(3)).size(), 4u);
  EXPECT_EQ(select_topk_dual(list(1), list(0)).size(), 1u);
  EXPECT_EQ(select_topk_dual(list(0), list(5)).size(), 2u);
  EXPECT_THROW(select_topk_dual(list(0), list(0)), Error);
  auto a = list(3), b = list(3);
  a[0].max_score = 0.11;
  b[0].max_score = 0.22;
  const auto sel = select_topk_dual(a, b);
  EXPECT_EQ(sel[0].max_score, 0.11);
  EXPECT_EQ(sel[2].max_score, 0.22);
}

TEST(Ranker, LearnsLinearTarget) {
  Rng r(14);
  std::vector<Eigen::VectorXd> f;
  std::vector<double> t;
  std::vector<bool> scored;
  for (int i = 0; i < 200; ++i) {
    Eigen::VectorXd x(3);
    for (auto& v : x) v = r.normal(0, 1);
    f.push_back(x);
    t.push_back(std::clamp(3.0 + x[0], 1.0, 5.0));
    scored.push_back(i % 5 != 0);
  }
  RankerConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.epochs = 100;
  cfg.curriculum.warmup_epochs = 10;
  Rng tr(15);
  const auto res = train_ranker(f, t, scored, cfg, tr);
  double err = 0;
  for (std::size_t i = 0; i < f.size(); ++i) err += std::abs(res.model.predict(f[i]) - t[i]) / double(f.size());
  EXPECT_LT(err, 0.3);
  EXPECT_LT(res.loss_trace.back(), res.loss_trace.front());
}

TEST(Persistence, MilAndRankerRoundTrip) {
  testing::TempDir dir("mil");
  Rng r(16);
  MilModel m{random_params(r, 4, 3), FeatureStandardizer::identity(4), {MilPooling::kLse, 0.01, 7.0}};
  m.standardizer.mean[1] = 0.3;
  save_mil_models(dir / "m.json", {m, m});
  const auto back = load_mil_models(dir / "m.json");
  ASSERT_EQ(back.size(), 2u);
  const auto h = random_bag(r, 3, 4);
  EXPECT_EQ(back[1].predict(h), m.predict(h));
  EXPECT_EQ(back[0].pooling.pooling, MilPooling::kLse);

  RankerModel rk{random_params(r, 4, 1), FeatureStandardizer::identity(4)};
  save_ranker(dir / "r.json", rk);
  const auto rb = load_ranker(dir / "r.json");
  const Eigen::VectorXd x = h.row(0).transpose();
  EXPECT_EQ(rb.predict(x), rk.predict(x));
  testing::write_text(dir / "bad.json", "{\"format\": \"nope\"}");
  EXPECT_THROW(load_mil_models(dir / "bad.json"), Error);
}

}  // namespace
}  // namespace lungcad
