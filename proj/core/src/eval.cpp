#include "lungcad/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <mutex>
#include <thread>
#include <tuple>

#include "lungcad/candidates.hpp"
#include "lungcad/csv.hpp"
#include "lungcad/rng.hpp"

namespace lungcad {

namespace {

struct MatchResult {
  std::size_t detected = 0;  // included nodules only
  std::size_t false_positives = 0;
};

// Greedy one-to-one matching of the first `m` candidates in `order`.
MatchResult match(const PatientDetections& p, const std::vector<std::size_t>& order, std::size_t m,
                  const std::vector<bool>& included) {
  std::vector<std::tuple<double, std::size_t, std::size_t>> pairs;
  std::vector<bool> hits_any(m, false);
  for (std::size_t r = 0; r < m; ++r) {
    const Vec3 c = p.centers_world[order[r]];
    for (std::size_t n = 0; n < p.nodules.size(); ++n) {
      if (!hit_test(c, p.nodules[n])) continue;
      hits_any[r] = true;
      pairs.emplace_back(distance(c, p.nodules[n].center_world), r, n);
    }
  }
  std::sort(pairs.begin(), pairs.end());
  std::vector<bool> cand_used(m, false), nod_used(p.nodules.size(), false);
  MatchResult out;
  for (const auto& [d, r, n] : pairs) {
    if (cand_used[r] || nod_used[n]) continue;
    cand_used[r] = nod_used[n] = true;
    if (included[n]) ++out.detected;
  }
  for (std::size_t r = 0; r < m; ++r) out.false_positives += hits_any[r] ? 0 : 1;
  return out;
}

// Per-patient step functions over the global threshold list.
struct SweepTable {
  std::vector<double> thresholds;  // distinct, descending
  struct Event {
    std::size_t index;  // first global threshold where this state applies
    std::size_t detected;
    std::size_t false_positives;
  };
  std::vector<std::vector<Event>> events;  // per patient, increasing index
  std::vector<std::size_t> nodules;        // included nodules per patient
};

SweepTable build_sweep(const std::vector<PatientDetections>& patients,
                       const std::function<bool(const NoduleAnnotation&)>& include) {
  SweepTable t;
  for (const auto& p : patients) {
    require(p.centers_world.size() == p.scores.size(), ErrorKind::kValidation,
            "patient " + p.patient_id + " has mismatched candidate centers and scores");
    for (double s : p.scores) {
      require(std::isfinite(s), ErrorKind::kValidation, "candidate scores must be finite");
      t.thresholds.push_back(s);
    }
  }
  std::sort(t.thresholds.begin(), t.thresholds.end(), std::greater<>());
  t.thresholds.erase(std::unique(t.thresholds.begin(), t.thresholds.end()), t.thresholds.end());

  t.events.resize(patients.size());
  t.nodules.resize(patients.size());
  for (std::size_t pi = 0; pi < patients.size(); ++pi) {
    const auto& p = patients[pi];
    std::vector<bool> included(p.nodules.size());
    for (std::size_t n = 0; n < p.nodules.size(); ++n) {
      included[n] = !include || include(p.nodules[n]);
      t.nodules[pi] += included[n];
    }
    std::vector<std::size_t> order(p.scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p.scores[a] > p.scores[b]; });
    std::size_t m = 0;
    while (m < order.size()) {
      const double s = p.scores[order[m]];
      while (m < order.size() && p.scores[order[m]] == s) ++m;
      const auto r = match(p, order, m, included);
      const auto gi = static_cast<std::size_t>(
          std::lower_bound(t.thresholds.begin(), t.thresholds.end(), s, std::greater<>()) - t.thresholds.begin());
      t.events[pi].push_back({gi, r.detected, r.false_positives});
    }
  }
  return t;
}

// Totals per global threshold for patient multiplicities `weight`.
void accumulate(const SweepTable& t, const std::vector<std::size_t>& weight, std::vector<double>& detected,
                std::vector<double>& fps) {
  const std::size_t n = t.thresholds.size();
  std::vector<double> dd(n + 1, 0.0), df(n + 1, 0.0);
  for (std::size_t p = 0; p < t.events.size(); ++p) {
    if (weight[p] == 0) continue;
    const double w = static_cast<double>(weight[p]);
    double prev_d = 0, prev_f = 0;
    for (const auto& e : t.events[p]) {
      dd[e.index] += w * (static_cast<double>(e.detected) - prev_d);
      df[e.index] += w * (static_cast<double>(e.false_positives) - prev_f);
      prev_d = static_cast<double>(e.detected);
      prev_f = static_cast<double>(e.false_positives);
    }
  }
  detected.assign(n, 0.0);
  fps.assign(n, 0.0);
  double d = 0, f = 0;
  for (std::size_t i = 0; i < n; ++i) {
    d += dd[i];
    f += df[i];
    detected[i] = d;
    fps[i] = f;
  }
}

FrocCurve curve_from_sweep(const SweepTable& t, std::size_t n_patients, std::size_t n_nodules) {
  FrocCurve c;
  c.n_patients = n_patients;
  c.n_nodules = n_nodules;
  if (n_nodules == 0) return c;
  std::vector<double> det, fps;
  accumulate(t, std::vector<std::size_t>(n_patients, 1), det, fps);
  for (std::size_t i = 0; i < t.thresholds.size(); ++i) {
    c.points.push_back({t.thresholds[i], fps[i] / static_cast<double>(n_patients),
                        det[i] / static_cast<double>(n_nodules), static_cast<std::size_t>(det[i]),
                        static_cast<std::size_t>(fps[i])});
  }
  return c;
}

FrocCurve froc_impl(const std::vector<PatientDetections>& patients,
                    const std::function<bool(const NoduleAnnotation&)>& include, bool allow_empty) {
  require(!patients.empty(), ErrorKind::kValidation, "FROC needs at least one patient");
  const SweepTable t = build_sweep(patients, include);
  const std::size_t n_nodules = std::accumulate(t.nodules.begin(), t.nodules.end(), std::size_t{0});
  require(allow_empty || n_nodules > 0, ErrorKind::kValidation, "FROC needs at least one nodule");
  return curve_from_sweep(t, patients.size(), n_nodules);
}

// Upper envelope of (fp, sens) with flat extrapolation.
double interpolate(const std::vector<double>& fp, const std::vector<double>& sens, double x) {
  std::vector<std::pair<double, double>> env;
  for (std::size_t i = 0; i < fp.size(); ++i) {
    if (!env.empty() && env.back().first == fp[i]) {
      env.back().second = std::max(env.back().second, sens[i]);
    } else {
      env.emplace_back(fp[i], sens[i]);
    }
  }
  if (env.empty()) return 0.0;
  if (x <= env.front().first) return env.front().second;
  if (x >= env.back().first) return env.back().second;
  auto it = std::upper_bound(env.begin(), env.end(), x, [](double v, const auto& e) { return v < e.first; });
  const auto& [x1, y1] = *it;
  const auto& [x0, y0] = *(it - 1);
  return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
}

double cpm_of(const std::vector<double>& fp, const std::vector<double>& sens) {
  double acc = 0.0;
  for (double op : kCpmOperatingPoints) acc += interpolate(fp, sens, op);
  return acc / static_cast<double>(kCpmOperatingPoints.size());
}

double nearest_rank(const std::vector<double>& sorted, double q) {
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(q * n - 1e-12));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

template <typename Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

FrocCurve froc(const std::vector<PatientDetections>& patients) { return froc_impl(patients, {}, false); }

FrocCurve froc(const std::vector<PatientDetections>& patients,
               const std::function<bool(const NoduleAnnotation&)>& include) {
  return froc_impl(patients, include, true);
}

double sensitivity_at(const FrocCurve& curve, double fp_per_scan) {
  std::vector<double> fp, sens;
  for (const auto& p : curve.points) {
    fp.push_back(p.fp_per_scan);
    sens.push_back(p.sensitivity);
  }
  return interpolate(fp, sens, fp_per_scan);
}

double cpm(const FrocCurve& curve) {
  require(!curve.points.empty(), ErrorKind::kValidation, "CPM needs a non-empty curve");
  std::vector<double> fp, sens;
  for (const auto& p : curve.points) {
    fp.push_back(p.fp_per_scan);
    sens.push_back(p.sensitivity);
  }
  return cpm_of(fp, sens);
}

double threshold_at_fp_rate(const FrocCurve& curve, double fp_per_scan) {
  require(!curve.points.empty(), ErrorKind::kValidation, "empty FROC curve");
  double t = curve.points.front().threshold;
  for (const auto& p : curve.points) {
    if (p.fp_per_scan <= fp_per_scan) t = p.threshold;
  }
  return t;
}

std::vector<DiameterBin> sensitivity_by_diameter(const std::vector<PatientDetections>& patients,
                                                 const std::vector<std::pair<double, double>>& bins) {
  std::vector<DiameterBin> out;
  for (const auto& [lo, hi] : bins) {
    require(lo < hi, ErrorKind::kValidation, "diameter bins need lo < hi");
    DiameterBin b{lo, hi, {}};
    b.curve = froc(patients, [lo = lo, hi = hi](const NoduleAnnotation& a) {
      return a.diameter_mm >= lo && a.diameter_mm < hi;
    });
    out.push_back(std::move(b));
  }
  return out;
}

RocCurve roc_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), ErrorKind::kValidation, "one label per score is required");
  std::size_t pos = 0, neg = 0;
  for (int l : labels) {
    require(l == 0 || l == 1, ErrorKind::kValidation, "ROC labels must be 0 or 1");
    (l ? pos : neg)++;
  }
  require(pos > 0 && neg > 0, ErrorKind::kValidation, "ROC needs both classes");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocCurve c;
  c.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    for (; i < order.size() && scores[order[i]] == s; ++i) (labels[order[i]] ? tp : fp) += 1;
    c.points.push_back({s, fp / static_cast<double>(neg), tp / static_cast<double>(pos)});
  }
  for (std::size_t i = 1; i < c.points.size(); ++i) {
    c.auc += (c.points[i].fpr - c.points[i - 1].fpr) * (c.points[i].tpr + c.points[i - 1].tpr) / 2.0;
  }
  return c;
}

double roc_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  return roc_curve(scores, labels).auc;
}

ConfidenceInterval bootstrap_ci(const ResampleMetric& metric, std::size_t n_patients, std::uint64_t seed,
                                std::size_t replicates, double level, int jobs) {
  require(n_patients >= 2, ErrorKind::kValidation, "bootstrap needs at least two patients");
  require(replicates >= 1 && level > 0 && level < 1, ErrorKind::kValidation, "invalid bootstrap settings");
  const std::size_t cap = 10 * replicates;
  std::vector<double> values(replicates, 0.0);
  std::vector<std::size_t> attempts(replicates, 0);
  parallel_for(replicates, jobs, [&](std::size_t b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    std::vector<std::size_t> sample(n_patients);
    while (attempts[b] < cap) {
      ++attempts[b];
      for (auto& s : sample) s = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n_patients) - 1));
      if (auto v = metric(sample)) {
        values[b] = *v;
        return;
      }
    }
  });
  const std::size_t total = std::accumulate(attempts.begin(), attempts.end(), std::size_t{0});
  require(total <= cap, ErrorKind::kValidation, "bootstrap metric undefined on too many resamples");
  std::sort(values.begin(), values.end());
  ConfidenceInterval ci;
  ci.level = level;
  ci.replicates = replicates;
  const double alpha = 1.0 - level;
  ci.lo = nearest_rank(values, alpha / 2.0);
  ci.hi = nearest_rank(values, 1.0 - alpha / 2.0);
  ci.values = std::move(values);
  return ci;
}

FrocEnvelope froc_bootstrap(const std::vector<PatientDetections>& patients, const FrocCurve& curve,
                            std::uint64_t seed, std::size_t replicates, double level, int jobs) {
  const SweepTable t = build_sweep(patients, {});
  require(t.thresholds.size() == curve.points.size(), ErrorKind::kValidation,
          "curve does not belong to these detections");
  const std::size_t n = patients.size();
  const std::size_t n_points = t.thresholds.size();

  // Per replicate: sensitivity at every original threshold, then the seven
  // operating-point sensitivities, then CPM.
  auto evaluate = [&](const std::vector<std::size_t>& sample) -> std::optional<std::vector<double>> {
    std::vector<std::size_t> weight(n, 0);
    for (std::size_t s : sample) ++weight[s];
    double nodules = 0;
    for (std::size_t p = 0; p < n; ++p) nodules += static_cast<double>(weight[p] * t.nodules[p]);
    if (nodules == 0) return std::nullopt;
    std::vector<double> det, fps;
    accumulate(t, weight, det, fps);
    std::vector<double> fp_rate(n_points), sens(n_points);
    for (std::size_t i = 0; i < n_points; ++i) {
      fp_rate[i] = fps[i] / static_cast<double>(n);
      sens[i] = det[i] / nodules;
    }
    std::vector<double> out = sens;
    for (double op : kCpmOperatingPoints) out.push_back(interpolate(fp_rate, sens, op));
    out.push_back(cpm_of(fp_rate, sens));
    return out;
  };

  std::vector<std::vector<double>> accepted(replicates);
  const std::size_t cap = 10 * replicates;
  std::vector<std::size_t> attempts(replicates, 0);
  require(n >= 2, ErrorKind::kValidation, "bootstrap needs at least two patients");
  parallel_for(replicates, jobs, [&](std::size_t b) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(b)));
    std::vector<std::size_t> sample(n);
    while (attempts[b] < cap) {
      ++attempts[b];
      for (auto& s : sample) s = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
      if (auto v = evaluate(sample)) {
        accepted[b] = std::move(*v);
        return;
      }
    }
  });
  const std::size_t total = std::accumulate(attempts.begin(), attempts.end(), std::size_t{0});
  require(total <= cap, ErrorKind::kValidation, "bootstrap metric undefined on too many resamples");

  const double alpha = 1.0 - level;
  auto interval = [&](std::size_t column) {
    ConfidenceInterval ci;
    ci.level = level;
    ci.replicates = replicates;
    for (const auto& r : accepted) ci.values.push_back(r[column]);
    std::sort(ci.values.begin(), ci.values.end());
    ci.lo = nearest_rank(ci.values, alpha / 2.0);
    ci.hi = nearest_rank(ci.values, 1.0 - alpha / 2.0);
    return ci;
  };

  FrocEnvelope env;
  env.level = level;
  env.replicates = replicates;
  for (std::size_t i = 0; i < n_points; ++i) {
    const auto ci = interval(i);
    env.lo.push_back(std::min(ci.lo, curve.points[i].sensitivity));
    env.hi.push_back(std::max(ci.hi, curve.points[i].sensitivity));
  }
  for (std::size_t k = 0; k < kCpmOperatingPoints.size(); ++k) env.operating_points.push_back(interval(n_points + k));
  env.cpm = interval(n_points + kCpmOperatingPoints.size());
  return env;
}

Calibration calibration(const std::vector<double>& probs, const std::vector<int>& labels, std::size_t n_bins) {
  require(probs.size() == labels.size(), ErrorKind::kValidation, "one label per probability is required");
  require(n_bins >= 1, ErrorKind::kValidation, "calibration needs at least one bin");
  Calibration c;
  c.bins.resize(n_bins);
  std::vector<double> sum_p(n_bins, 0.0), sum_y(n_bins, 0.0);
  for (std::size_t b = 0; b < n_bins; ++b) {
    c.bins[b].lo = static_cast<double>(b) / static_cast<double>(n_bins);
    c.bins[b].hi = static_cast<double>(b + 1) / static_cast<double>(n_bins);
  }
  for (std::size_t i = 0; i < probs.size(); ++i) {
    const double p = probs[i];
    require(p >= 0.0 && p <= 1.0, ErrorKind::kValidation, "calibration probabilities must lie in [0, 1]");
    const auto b = std::min(n_bins - 1, static_cast<std::size_t>(std::floor(p * static_cast<double>(n_bins))));
    ++c.bins[b].count;
    sum_p[b] += p;
    sum_y[b] += labels[i] ? 1.0 : 0.0;
  }
  for (std::size_t b = 0; b < n_bins; ++b) {
    auto& bin = c.bins[b];
    if (bin.count == 0) continue;
    bin.mean_prob = sum_p[b] / static_cast<double>(bin.count);
    bin.frequency = sum_y[b] / static_cast<double>(bin.count);
    c.ece += static_cast<double>(bin.count) / static_cast<double>(probs.size()) * std::abs(bin.mean_prob - bin.frequency);
  }
  return c;
}

void save_froc_csv(const std::filesystem::path& path, const FrocCurve& curve, const FrocEnvelope* envelope) {
  require(!envelope || envelope->lo.size() == curve.points.size(), ErrorKind::kValidation,
          "envelope does not match the curve");
  std::ostringstream out;
  out << "threshold,fp_per_scan,sensitivity" << (envelope ? ",lo,hi" : "") << "\n";
  for (std::size_t i = 0; i < curve.points.size(); ++i) {
    const auto& p = curve.points[i];
    out << csv::format_double(p.threshold) << ',' << csv::format_double(p.fp_per_scan) << ','
        << csv::format_double(p.sensitivity);
    if (envelope) out << ',' << csv::format_double(envelope->lo[i]) << ',' << csv::format_double(envelope->hi[i]);
    out << "\n";
  }
  csv::write_atomic(path, out.str());
}

FrocCurve load_froc_csv(const std::filesystem::path& path) {
  const auto table = csv::read_file(path);
  require(table.header.size() >= 3 && table.header[0] == "threshold" && table.header[1] == "fp_per_scan" &&
              table.header[2] == "sensitivity",
          ErrorKind::kFormat, path.string() + ": unexpected FROC header");
  FrocCurve c;
  for (const auto& [line, row] : table.rows) {
    require(row.size() == table.header.size(), ErrorKind::kParse,
            path.string() + ": row " + std::to_string(line) + " has the wrong field count");
    FrocPoint p;
    p.threshold = csv::parse_double(row[0], "threshold", line);
    p.fp_per_scan = csv::parse_double(row[1], "fp_per_scan", line);
    p.sensitivity = csv::parse_double(row[2], "sensitivity", line);
    c.points.push_back(p);
  }
  return c;
}

void save_roc_csv(const std::filesystem::path& path, const RocCurve& curve) {
  std::ostringstream out;
  out << "threshold,fpr,tpr\n";
  for (const auto& p : curve.points) {
    out << csv::format_double(p.threshold) << ',' << csv::format_double(p.fpr) << ',' << csv::format_double(p.tpr)
        << "\n";
  }
  csv::write_atomic(path, out.str());
}

RocCurve load_roc_csv(const std::filesystem::path& path) {
  const auto table = csv::read_file(path);
  require(table.header == std::vector<std::string>{"threshold", "fpr", "tpr"}, ErrorKind::kFormat,
          path.string() + ": unexpected ROC header");
  RocCurve c;
  for (const auto& [line, row] : table.rows) {
    require(row.size() == 3, ErrorKind::kParse, path.string() + ": row " + std::to_string(line) + " needs 3 fields");
    c.points.push_back({csv::parse_double(row[0], "threshold", line), csv::parse_double(row[1], "fpr", line),
                        csv::parse_double(row[2], "tpr", line)});
  }
  for (std::size_t i = 1; i < c.points.size(); ++i) {
    c.auc += (c.points[i].fpr - c.points[i - 1].fpr) * (c.points[i].tpr + c.points[i - 1].tpr) / 2.0;
  }
  return c;
}

}  // namespace lungcad
