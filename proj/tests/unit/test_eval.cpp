#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "lungcad/eval.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

namespace lungcad {
namespace {

NoduleAnnotation nodule(const std::string& id, Vec3 c, double d) { return {id, c, d, {}}; }

TEST(Froc, PerfectDetector) {
  std::vector<PatientDetections> pts;
  for (int i = 0; i < 3; ++i) {
    PatientDetections p{"p" + std::to_string(i), {}, {}, {}};
    for (int j = 0; j <= i; ++j) {
      const Vec3 c{10.0 * j, 5, 5};
      p.nodules.push_back(nodule(p.patient_id, c, 6));
      p.centers_world.push_back(c);
      p.scores.push_back(1.0);
    }
    pts.push_back(p);
  }
  const auto f = froc(pts);
  ASSERT_EQ(f.points.size(), 1u);
  EXPECT_EQ(f.points[0].sensitivity, 1.0);
  EXPECT_EQ(f.points[0].fp_per_scan, 0.0);
  EXPECT_EQ(f.n_nodules, 6u);
  EXPECT_EQ(cpm(f), 1.0);
}

TEST(Froc, OnlyFalsePositives) {
  std::vector<PatientDetections> pts;
  for (int i = 0; i < 4; ++i)
    pts.push_back({"p", {{50, 50, 50}}, {1.0}, {nodule("p", {0, 0, 0}, 6)}});
  const auto f = froc(pts);
  ASSERT_EQ(f.points.size(), 1u);
  EXPECT_EQ(f.points[0].sensitivity, 0.0);
  EXPECT_EQ(f.points[0].fp_per_scan, 1.0);
}

TEST(Froc, DegenerateInputsAreRejected) {
  EXPECT_THROW(froc({}), Error);
  EXPECT_THROW(froc({{"p", {{0, 0, 0}}, {0.5}, {}}}), Error);
}

TEST(Froc, OneCandidateCountsForOneNodule) {
  // Two overlapping nodules, one candidate hitting both.
  const PatientDetections p{"p", {{0, 0, 0}}, {0.9}, {nodule("p", {1, 0, 0}, 6), nodule("p", {-2, 0, 0}, 6)}};
  const auto f = froc({p});
  EXPECT_EQ(f.points.back().detected, 1u);
  EXPECT_EQ(f.points.back().false_positives, 0u);
}

// Per-threshold recount: enumerate hit pairs by distance and assign greedily.
struct Recount {
  std::size_t detected = 0, fp = 0;
};
Recount recount(const std::vector<PatientDetections>& pts, double t) {
  Recount r;
  for (const auto& p : pts) {
    struct Pair {
      double d;
      std::size_t c, n;
    };
    std::vector<Pair> pairs;
    std::vector<bool> hits_any(p.scores.size(), false);
    for (std::size_t c = 0; c < p.scores.size(); ++c) {
      if (!(p.scores[c] >= t)) continue;
      for (std::size_t n = 0; n < p.nodules.size(); ++n) {
        const double d = distance(p.centers_world[c], p.nodules[n].center_world);
        if (d < p.nodules[n].diameter_mm / 2) {
          pairs.push_back({d, c, n});
          hits_any[c] = true;
        }
      }
      if (!hits_any[c]) ++r.fp;
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.d < b.d; });
    std::vector<bool> cu(p.scores.size()), nu(p.nodules.size());
    for (const auto& q : pairs)
      if (!cu[q.c] && !nu[q.n]) {
        cu[q.c] = nu[q.n] = true;
        ++r.detected;
      }
  }
  return r;
}

TEST(Froc, MatchesBruteForceRecount) {
  Rng r(1);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<PatientDetections> pts;
    std::size_t total_nodules = 0;
    const int np = int(r.uniform_int(1, 4));
    for (int i = 0; i < np; ++i) {
      PatientDetections p{"p" + std::to_string(i), {}, {}, {}};
      const int nn = int(r.uniform_int(0, 3));
      for (int j = 0; j < nn; ++j)
        p.nodules.push_back(nodule(p.patient_id, {r.uniform(0, 20), r.uniform(0, 20), 0}, r.uniform(4, 12)));
      const int nc = int(r.uniform_int(0, 6));
      for (int j = 0; j < nc; ++j) {
        p.centers_world.push_back({r.uniform(0, 20), r.uniform(0, 20), 0});
        // Coarse scores so ties occur.
        p.scores.push_back(double(r.uniform_int(1, 5)) / 5.0);
      }
      total_nodules += p.nodules.size();
      pts.push_back(p);
    }
    if (total_nodules == 0) continue;
    const auto f = froc(pts);
    std::set<double> thresholds;
    for (const auto& p : pts) thresholds.insert(p.scores.begin(), p.scores.end());
    ASSERT_EQ(f.points.size(), thresholds.size());
    auto it = thresholds.rbegin();
    for (std::size_t k = 0; k < f.points.size(); ++k, ++it) {
      const auto& pt = f.points[k];
      ASSERT_EQ(pt.threshold, *it);
      const auto rc = recount(pts, pt.threshold);
      ASSERT_EQ(pt.detected, rc.detected);
      ASSERT_EQ(pt.false_positives, rc.fp);
      ASSERT_NEAR(pt.sensitivity, double(rc.detected) / double(total_nodules), 1e-15);
      ASSERT_NEAR(pt.fp_per_scan, double(rc.fp) / double(np), 1e-15);
      if (k) {
        ASSERT_GE(pt.sensitivity, f.points[k - 1].sensitivity);
        ASSERT_GE(pt.fp_per_scan, f.points[k - 1].fp_per_scan);
      }
    }
  }
}

FrocCurve manual_curve(const std::vector<std::pair<double, double>>& fp_sens) {
  FrocCurve c;
  c.n_patients = 1;
  c.n_nodules = 1;
  double t = 1.0;
  for (const auto& [fp, s] : fp_sens) {
    c.points.push_back({t, fp, s, 0, 0});
    t *= 0.5;
  }
  return c;
}

TEST(Cpm, ConstantSensitivity) { EXPECT_NEAR(cpm(manual_curve({{0.01, 0.9}, {20, 0.9}})), 0.9, 1e-15); }

TEST(Cpm, SevenPublishedSensitivities) {
  const std::vector<double> s = {0.832, 0.879, 0.920, 0.942, 0.951, 0.959, 0.964};
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < s.size(); ++i) pts.push_back({kCpmOperatingPoints[i], s[i]});
  const double mean = (0.832 + 0.879 + 0.920 + 0.942 + 0.951 + 0.959 + 0.964) / 7;
  EXPECT_NEAR(cpm(manual_curve(pts)), mean, 1e-12);
  EXPECT_NEAR(cpm(manual_curve(pts)), 0.921, 0.001);
}

TEST(Cpm, StepCurveByHand) {
  // (0.5, 0) then (1, 1): 1/8, 1/4 extrapolate flat at 0, 1/2 sits on 0,
  // and 1, 2, 4, 8 are 1.
  const auto c = manual_curve({{0.5, 0.0}, {1.0, 1.0}});
  EXPECT_NEAR(cpm(c), 4.0 / 7.0, 1e-15);
  EXPECT_NEAR(sensitivity_at(c, 0.75), 0.5, 1e-15);
  EXPECT_EQ(sensitivity_at(c, 0.01), 0.0);
  EXPECT_EQ(sensitivity_at(c, 100), 1.0);
}

TEST(Cpm, UpperEnvelopeAtRepeatedFpRate) {
  const auto c = manual_curve({{1.0, 0.2}, {1.0, 0.6}, {3.0, 0.8}});
  EXPECT_NEAR(sensitivity_at(c, 1.0), 0.6, 1e-15);
  EXPECT_NEAR(sensitivity_at(c, 2.0), 0.7, 1e-15);
}

TEST(ThresholdAtFpRate, PicksMostPermissive) {
  const auto c = manual_curve({{0.5, 0.1}, {1.0, 0.5}, {2.0, 0.9}});
  EXPECT_EQ(threshold_at_fp_rate(c, 1.0), 0.5);
  EXPECT_EQ(threshold_at_fp_rate(c, 1.5), 0.5);
  EXPECT_EQ(threshold_at_fp_rate(c, 0.1), 1.0);
  EXPECT_EQ(threshold_at_fp_rate(c, 9.0), 0.25);
}

TEST(ByDiameter, LeftClosedBinsAndSharedFalsePositives) {
  const PatientDetections p{"p",
                            {{0, 0, 0}, {20, 0, 0}, {80, 0, 0}},
                            {0.9, 0.8, 0.7},
                            {nodule("p", {0, 0, 0}, 5.0), nodule("p", {20, 0, 0}, 4.0)}};
  const auto bins = sensitivity_by_diameter({p});
  ASSERT_EQ(bins.size(), 2u);
  EXPECT_EQ(bins[0].curve.n_nodules, 1u);  // 4 mm in [3, 5)
  EXPECT_EQ(bins[1].curve.n_nodules, 1u);  // 5 mm in [5, 30)
  EXPECT_EQ(bins[1].curve.points.front().sensitivity, 1.0);
  EXPECT_EQ(bins[0].curve.points.front().sensitivity, 0.0);
  EXPECT_EQ(bins[0].curve.points.back().false_positives, 1u);
  EXPECT_EQ(bins[1].curve.points.back().false_positives, 1u);
  const auto mid = sensitivity_by_diameter({p}, {{3.0, 30.0}, {30.0, 40.0}});
  const auto global = froc({p});
  ASSERT_EQ(mid[0].curve.points.size(), global.points.size());
  for (std::size_t i = 0; i < global.points.size(); ++i)
    EXPECT_EQ(mid[0].curve.points[i].sensitivity, global.points[i].sensitivity);
  EXPECT_TRUE(mid[1].curve.empty());
}

TEST(Roc, Examples) {
  EXPECT_EQ(roc_auc({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}), 1.0);
  EXPECT_EQ(roc_auc({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}), 0.5);
  EXPECT_EQ(roc_auc({0.1, 0.2}, {1, 0}), 0.0);
  EXPECT_THROW(roc_auc({0.1, 0.2}, {1, 1}), Error);
  const auto c = roc_curve({0.9, 0.1}, {1, 0});
  EXPECT_EQ(c.points.front().fpr, 0.0);
  EXPECT_EQ(c.points.front().tpr, 0.0);
  EXPECT_EQ(c.points.back().fpr, 1.0);
  EXPECT_EQ(c.points.back().tpr, 1.0);
}

TEST(Roc, MatchesPairwiseOracleAndMonotoneInvariance) {
  Rng r(2);
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = std::size_t(r.uniform_int(2, 20));
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = double(r.uniform_int(0, 6)) / 6.0;
      y[i] = int(i % 2);
    }
    const double a = roc_auc(s, y);
    EXPECT_NEAR(a, testing::pairwise_auc(s, y), 1e-12);
    std::vector<double> m(n);
    for (std::size_t i = 0; i < n; ++i) m[i] = std::exp(3 * s[i]) - 7;
    EXPECT_NEAR(roc_auc(m, y), a, 1e-12);
  }
}

TEST(Bootstrap, ConstantMetric) {
  const auto ci = bootstrap_ci([](const std::vector<std::size_t>&) { return std::optional<double>(0.42); }, 10, 1, 200);
  EXPECT_EQ(ci.lo, 0.42);
  EXPECT_EQ(ci.hi, 0.42);
  EXPECT_EQ(ci.replicates, 200u);
}

TEST(Bootstrap, DeterministicAndIndependentOfJobs) {
  std::vector<double> v(30);
  Rng r(3);
  for (double& x : v) x = r.uniform();
  const ResampleMetric mean = [&](const std::vector<std::size_t>& idx) {
    double s = 0;
    for (auto i : idx) s += v[i];
    return std::optional<double>(s / double(idx.size()));
  };
  const auto a = bootstrap_ci(mean, v.size(), 7, 300);
  const auto b = bootstrap_ci(mean, v.size(), 7, 300, 0.95, 3);
  EXPECT_EQ(a.lo, b.lo);
  EXPECT_EQ(a.hi, b.hi);
  EXPECT_EQ(a.values, b.values);
  EXPECT_LT(a.lo, a.hi);
  EXPECT_GE(a.lo, a.values.front());
  EXPECT_LE(a.hi, a.values.back());
  EXPECT_TRUE(std::is_sorted(a.values.begin(), a.values.end()));
}

TEST(Bootstrap, UndefinedReplicatesAreRedrawnThenCapped) {
  // Undefined whenever patient 0 is absent.
  const ResampleMetric m = [](const std::vector<std::size_t>& idx) -> std::optional<double> {
    if (std::find(idx.begin(), idx.end(), 0u) == idx.end()) return std::nullopt;
    return 1.0;
  };
  const auto ci = bootstrap_ci(m, 3, 1, 100);
  EXPECT_EQ(ci.values.size(), 100u);
  const ResampleMetric never = [](const std::vector<std::size_t>&) { return std::optional<double>(); };
  EXPECT_THROW(bootstrap_ci(never, 3, 1, 10), Error);
  EXPECT_THROW(bootstrap_ci(never, 1, 1, 10), Error);
}

TEST(FrocBootstrap, EnvelopeContainsCurve) {
  Rng r(4);
  std::vector<PatientDetections> pts;
  for (int i = 0; i < 12; ++i) {
    PatientDetections p{"p" + std::to_string(i), {}, {}, {nodule("p", {0, 0, 0}, 8)}};
    p.centers_world = {{r.bernoulli(0.7) ? 0.0 : 30.0, 0, 0}, {50, 0, 0}};
    p.scores = {r.uniform(0.3, 1), r.uniform(0, 0.8)};
    pts.push_back(p);
  }
  const auto f = froc(pts);
  const auto env = froc_bootstrap(pts, f, 5, 200);
  ASSERT_EQ(env.lo.size(), f.points.size());
  for (std::size_t i = 0; i < f.points.size(); ++i) {
    EXPECT_LE(env.lo[i], f.points[i].sensitivity);
    EXPECT_GE(env.hi[i], f.points[i].sensitivity);
  }
  EXPECT_EQ(env.operating_points.size(), 7u);
  EXPECT_LE(env.cpm.lo, env.cpm.hi);
}

TEST(Calibration, Examples) {
  // Bin [0.2, 0.3): mean 0.25 with frequency 1/4.
  const auto exact = calibration({0.25, 0.25, 0.25, 0.25}, {1, 0, 0, 0});
  EXPECT_NEAR(exact.ece, 0.0, 1e-15);
  EXPECT_EQ(calibration({1.0, 1.0, 1.0}, {0, 0, 0}).ece, 1.0);
  const auto c = calibration({1.0, 0.0}, {1, 0}, 4);
  ASSERT_EQ(c.bins.size(), 4u);
  EXPECT_EQ(c.bins[3].count, 1u);
  EXPECT_EQ(c.bins[0].count, 1u);
}

TEST(Calibration, MatchesDirectRecomputation) {
  Rng r(5);
  for (int t = 0; t < 50; ++t) {
    const std::size_t n = 40;
    std::vector<double> p(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = r.uniform();
      y[i] = r.bernoulli(p[i]);
    }
    const std::size_t bins = 5;
    double ece = 0;
    for (std::size_t b = 0; b < bins; ++b) {
      double sp = 0, sy = 0, cnt = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t k = std::min(bins - 1, std::size_t(p[i] * double(bins)));
        if (k != b) continue;
        sp += p[i];
        sy += y[i];
        cnt += 1;
      }
      if (cnt > 0) ece += cnt / double(n) * std::abs(sp / cnt - sy / cnt);
    }
    const auto c = calibration(p, y, bins);
    EXPECT_NEAR(c.ece, ece, 1e-12);
    EXPECT_GE(c.ece, 0.0);
    EXPECT_LE(c.ece, 1.0);
  }
}

TEST(CurveCsv, RoundTrips) {
  testing::TempDir dir("eval");
  const auto f = manual_curve({{0.2, 0.1}, {1.0 / 3.0, 0.5}, {2.0, 0.9}});
  save_froc_csv(dir / "f.csv", f);
  const auto fb = load_froc_csv(dir / "f.csv");
  ASSERT_EQ(fb.points.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(fb.points[i].threshold, f.points[i].threshold);
    EXPECT_EQ(fb.points[i].fp_per_scan, f.points[i].fp_per_scan);
    EXPECT_EQ(fb.points[i].sensitivity, f.points[i].sensitivity);
  }
  const auto roc = roc_curve({0.9, 0.7, 0.3, 0.1 / 3}, {1, 0, 1, 0});
  save_roc_csv(dir / "r.csv", roc);
  const auto rb = load_roc_csv(dir / "r.csv");
  ASSERT_EQ(rb.points.size(), roc.points.size());
  for (std::size_t i = 0; i < roc.points.size(); ++i) {
    EXPECT_EQ(rb.points[i].fpr, roc.points[i].fpr);
    EXPECT_EQ(rb.points[i].tpr, roc.points[i].tpr);
  }
  EXPECT_NEAR(rb.auc, roc.auc, 1e-15);
}

}  // namespace
}  // namespace lungcad
