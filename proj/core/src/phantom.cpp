#include "lungcad/phantom.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "lungcad/annotations.hpp"
#include "lungcad/csv.hpp"
#include "lungcad/metaimage.hpp"

namespace lungcad {

void PhantomConfig::validate() const {
  const auto bad = [](const std::string& what) { fail(ErrorKind::kConfiguration, "phantom: " + what); };
  if (shape.empty()) bad("shape must be positive");
  if (!(spacing.x > 0 && spacing.y > 0 && spacing.z > 0)) bad("spacing must be positive");
  if (!(background_sigma >= 0 && nodule_hu_sd >= 0 && edge_sigma_mm > 0 && border_mm >= 0)) bad("invalid intensity model");
  if (!(min_nodules >= 0 && min_nodules <= max_nodules)) bad("invalid nodule count range");
  if (!(min_diameter_mm >= 3.0 && min_diameter_mm <= max_diameter_mm && max_diameter_mm <= 30.0))
    bad("diameter range must lie within [3, 30] mm");
  if (!(malignant_diameter_mm >= 3.0 && malignant_diameter_mm <= 30.0)) bad("malignancy diameter must lie in [3, 30] mm");
  if (!(min_vessels >= 0 && min_vessels <= max_vessels)) bad("invalid vessel count range");
  if (!(min_vessel_radius_mm > 0 && min_vessel_radius_mm <= max_vessel_radius_mm)) bad("invalid vessel radius range");
  if (!(min_vessel_length_mm > 0 && min_vessel_length_mm <= max_vessel_length_mm)) bad("invalid vessel length range");
  if (!(min_raters >= 0 && min_raters <= max_raters && max_raters <= 4)) bad("rater count must lie in [0, 4]");
  if (max_retries < 1) bad("max_retries must be positive");
  if (nodule_hu - 3 * nodule_hu_sd <= background_hu) bad("nodules must be denser than the background");
}

int synthetic_rater_score(double diameter_mm, Rng& rng) {
  const double base = std::round(1.0 + 4.0 * (diameter_mm - 3.0) / 27.0);
  const auto jitter = static_cast<double>(rng.uniform_int(-1, 1));
  return static_cast<int>(std::clamp(base + jitter, 1.0, 5.0));
}

namespace {

double sample_diameter(const PhantomConfig& cfg, Rng& rng) {
  const double lo = cfg.min_diameter_mm, hi = cfg.max_diameter_mm, u = rng.uniform();
  if (lo == hi) return lo;
  const double q = 1.0 - cfg.diameter_power;
  if (std::abs(q) < 1e-12) return lo * std::pow(hi / lo, u);
  return std::pow(std::pow(lo, q) + u * (std::pow(hi, q) - std::pow(lo, q)), 1.0 / q);
}

Vec3 random_direction(Rng& rng) {
  for (;;) {
    Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n = norm(v);
    if (n > 1e-9) return v * (1.0 / n);
  }
}

double segment_distance(Vec3 p, Vec3 a, Vec3 b) {
  const Vec3 ab = b - a;
  const double t = std::clamp(dot(p - a, ab) / std::max(dot(ab, ab), 1e-300), 0.0, 1.0);
  return distance(p, a + ab * t);
}

// Fraction of full density at distance r from an object of radius R.
double edge_profile(double r, double radius, double sigma) {
  return 0.5 * std::erfc((r - radius) / (std::sqrt(2.0) * sigma));
}

struct Box {
  Index3 lo, hi;  // inclusive
};

Box voxel_box(const Geometry& g, Vec3 lo_world, Vec3 hi_world) {
  const Vec3 a = g.world_to_voxel(lo_world), b = g.world_to_voxel(hi_world);
  Box box;
  for (int ax = 0; ax < 3; ++ax) {
    box.lo[ax] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::floor(std::min(a[ax], b[ax]))), 0,
                                          g.shape[ax] - 1);
    box.hi[ax] = std::clamp<std::int64_t>(static_cast<std::int64_t>(std::ceil(std::max(a[ax], b[ax]))), 0,
                                          g.shape[ax] - 1);
  }
  return box;
}

template <typename Fn>
void for_box(const Box& b, Fn&& fn) {
  for (auto z = b.lo.z; z <= b.hi.z; ++z)
    for (auto y = b.lo.y; y <= b.hi.y; ++y)
      for (auto x = b.lo.x; x <= b.hi.x; ++x) fn(x, y, z);
}

bool place_nodules(const PhantomConfig& cfg, const Geometry& g, Rng& rng, std::vector<double>& diameters,
                   std::vector<Vec3>& centers) {
  const int count = static_cast<int>(rng.uniform_int(cfg.min_nodules, cfg.max_nodules));
  diameters.clear();
  centers.clear();
  for (int i = 0; i < count; ++i) diameters.push_back(sample_diameter(cfg, rng));
  // Largest first so the hardest placements happen while space is free.
  std::sort(diameters.begin(), diameters.end(), std::greater<>());
  const Vec3 lo_world = g.origin;
  const Vec3 hi_world = g.voxel_to_world(Index3{g.shape.nx - 1, g.shape.ny - 1, g.shape.nz - 1});
  for (double d : diameters) {
    const double keep = d / 2.0 + cfg.border_mm;
    bool placed = false;
    for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
      Vec3 c;
      bool fits = true;
      for (int ax = 0; ax < 3; ++ax) {
        const double a = lo_world[ax] + keep, b = hi_world[ax] - keep;
        if (a > b) {
          fits = false;
          break;
        }
        c[ax] = rng.uniform(a, b);
      }
      if (!fits) return false;
      placed = true;
      for (std::size_t j = 0; j < centers.size(); ++j) {
        const double gap = distance(c, centers[j]) - d / 2.0 - diameters[j] / 2.0;
        if (gap < std::max(d, diameters[j])) {
          placed = false;
          break;
        }
      }
      if (placed) centers.push_back(c);
    }
    if (!placed) return false;
  }
  return true;
}

}  // namespace

Phantom generate_phantom(const PhantomConfig& cfg, Rng& rng, const std::string& patient_id) {
  cfg.validate();
  Rng layout_rng = rng.fork();
  Rng vessel_rng = rng.fork();
  Rng score_rng = rng.fork();
  Rng noise_rng = rng.fork();

  const Geometry g{cfg.shape, cfg.spacing, cfg.origin};
  std::vector<double> diameters;
  std::vector<Vec3> centers;
  bool ok = false;
  for (int attempt = 0; attempt < cfg.max_retries && !ok; ++attempt) ok = place_nodules(cfg, g, layout_rng, diameters, centers);
  require(ok, ErrorKind::kGeneration,
          "could not place non-overlapping nodules in " + patient_id + " after " + std::to_string(cfg.max_retries) +
              " attempts");

  Phantom ph;
  ph.patient_id = patient_id;
  for (std::size_t i = 0; i < centers.size(); ++i) {
    NoduleAnnotation a;
    a.patient_id = patient_id;
    a.center_world = centers[i];
    a.diameter_mm = diameters[i];
    const auto raters = score_rng.uniform_int(cfg.min_raters, cfg.max_raters);
    for (int r = 0; r < raters; ++r) a.radiologist_scores.push_back(synthetic_rater_score(a.diameter_mm, score_rng));
    ph.nodules.push_back(std::move(a));
    const double sd = cfg.nodule_hu_sd;
    ph.nodule_hu.push_back(std::clamp(layout_rng.normal(cfg.nodule_hu, sd), cfg.nodule_hu - 3 * sd, cfg.nodule_hu + 3 * sd));
    if (diameters[i] >= cfg.malignant_diameter_mm) ph.label = 1;
  }

  const Vec3 hi_world = g.voxel_to_world(Index3{g.shape.nx - 1, g.shape.ny - 1, g.shape.nz - 1});
  const auto n_vessels = vessel_rng.uniform_int(cfg.min_vessels, cfg.max_vessels);
  for (std::int64_t v = 0; v < n_vessels; ++v) {
    for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
      Vessel ves;
      ves.radius_mm = vessel_rng.uniform(cfg.min_vessel_radius_mm, cfg.max_vessel_radius_mm);
      const double len = vessel_rng.uniform(cfg.min_vessel_length_mm, cfg.max_vessel_length_mm);
      Vec3 c;
      for (int ax = 0; ax < 3; ++ax) c[ax] = vessel_rng.uniform(g.origin[ax], hi_world[ax]);
      const Vec3 u = random_direction(vessel_rng);
      ves.a = c - u * (len / 2.0);
      ves.b = c + u * (len / 2.0);
      const double sd = cfg.nodule_hu_sd;
      ves.hu = std::clamp(vessel_rng.normal(cfg.nodule_hu, sd), cfg.nodule_hu - 3 * sd, cfg.nodule_hu + 3 * sd);
      bool clear = true;
      for (const auto& n : ph.nodules) {
        if (segment_distance(n.center_world, ves.a, ves.b) < n.diameter_mm / 2.0 + ves.radius_mm + cfg.vessel_clearance_mm)
          clear = false;
      }
      if (clear) {
        ph.vessels.push_back(ves);
        break;
      }
    }
  }

  // Noise-free excess density over the background, max-composited.
  Grid3 signal(g, 0.0);
  const double reach = 4.0 * cfg.edge_sigma_mm;
  for (std::size_t i = 0; i < ph.nodules.size(); ++i) {
    const auto& n = ph.nodules[i];
    const double radius = n.diameter_mm / 2.0, excess = ph.nodule_hu[i] - cfg.background_hu;
    const Vec3 ext{radius + reach, radius + reach, radius + reach};
    for_box(voxel_box(g, n.center_world - ext, n.center_world + ext), [&](auto x, auto y, auto z) {
      const double r = distance(g.voxel_to_world(Index3{x, y, z}), n.center_world);
      double& s = signal(x, y, z);
      s = std::max(s, excess * edge_profile(r, radius, cfg.edge_sigma_mm));
    });
  }
  for (const auto& ves : ph.vessels) {
    const double excess = ves.hu - cfg.background_hu, pad = ves.radius_mm + reach;
    const Vec3 lo{std::min(ves.a.x, ves.b.x) - pad, std::min(ves.a.y, ves.b.y) - pad, std::min(ves.a.z, ves.b.z) - pad};
    const Vec3 hi{std::max(ves.a.x, ves.b.x) + pad, std::max(ves.a.y, ves.b.y) + pad, std::max(ves.a.z, ves.b.z) + pad};
    for_box(voxel_box(g, lo, hi), [&](auto x, auto y, auto z) {
      const double r = segment_distance(g.voxel_to_world(Index3{x, y, z}), ves.a, ves.b);
      if (r > pad) return;
      double& s = signal(x, y, z);
      s = std::max(s, excess * edge_profile(r, ves.radius_mm, cfg.edge_sigma_mm));
    });
  }

  Grid3 image(g, 0.0);
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = cfg.background_hu + signal[i] + noise_rng.normal(0.0, cfg.background_sigma);
    image[i] = std::clamp(std::round(v), kRawHuMin, kRawHuMax);
  }
  ph.volume = CtVolume{std::move(image), false};
  return ph;
}

std::string phantom_patient_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "P%04zu", index);
  return buf;
}

Phantom generate_patient(const PhantomConfig& cfg, std::uint64_t root_seed, std::size_t index) {
  Rng rng(derive_seed(root_seed, static_cast<std::uint64_t>(index)));
  return generate_phantom(cfg, rng, phantom_patient_id(index));
}

double DatasetManifest::prevalence() const {
  if (entries.empty()) return 0.0;
  double pos = 0;
  for (const auto& e : entries) pos += e.label;
  return pos / static_cast<double>(entries.size());
}

std::vector<NoduleAnnotation> DatasetManifest::annotations_for(const std::string& patient_id) const {
  std::vector<NoduleAnnotation> out;
  for (const auto& a : annotations)
    if (a.patient_id == patient_id) out.push_back(a);
  return out;
}

void save_manifest(const std::filesystem::path& manifest_csv, const std::vector<ManifestEntry>& entries) {
  std::ostringstream out;
  out << "patient_id,volume,label\n";
  for (const auto& e : entries) out << e.patient_id << ',' << e.volume << ',' << e.label << "\n";
  csv::write_atomic(manifest_csv, out.str());
}

DatasetManifest generate_dataset(std::size_t n_patients, const PhantomConfig& cfg, std::uint64_t root_seed,
                                 const std::filesystem::path& out_dir, int jobs) {
  require(n_patients >= 1, ErrorKind::kValidation, "dataset needs at least one patient");
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "volumes", ec);
  require(!ec, ErrorKind::kIo, "cannot create " + (out_dir / "volumes").string() + ": " + ec.message());

  DatasetManifest m;
  m.directory = out_dir;
  m.entries.resize(n_patients);
  std::vector<std::vector<NoduleAnnotation>> per_patient(n_patients);
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < n_patients; i = next++) {
      try {
        Phantom ph = generate_patient(cfg, root_seed, i);
        const std::string rel = "volumes/" + ph.patient_id + ".mhd";
        save_metaimage(out_dir / rel, ph.volume.image, ElementType::kShort);
        m.entries[i] = {ph.patient_id, rel, ph.label};
        per_patient[i] = std::move(ph.nodules);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, jobs)), n_patients);
  for (std::size_t w = 1; w < workers; ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);

  for (auto& v : per_patient) m.annotations.insert(m.annotations.end(), v.begin(), v.end());
  save_annotations_csv(out_dir / "annotations.csv", m.annotations);
  save_manifest(out_dir / "manifest.csv", m.entries);
  return m;
}

DatasetManifest load_manifest(const std::filesystem::path& manifest_csv) {
  const auto table = csv::read_file(manifest_csv);
  require(table.header == std::vector<std::string>{"patient_id", "volume", "label"}, ErrorKind::kFormat,
          manifest_csv.string() + ": expected header patient_id,volume,label");
  DatasetManifest m;
  m.directory = manifest_csv.parent_path();
  for (const auto& [line, row] : table.rows) {
    require(row.size() == 3, ErrorKind::kParse, manifest_csv.string() + ": row " + std::to_string(line) + " needs 3 fields");
    const auto label = csv::parse_int(row[2], "label", line);
    require(label == 0 || label == 1, ErrorKind::kValidation,
            manifest_csv.string() + ": row " + std::to_string(line) + " label must be 0 or 1");
    m.entries.push_back({row[0], row[1], static_cast<int>(label)});
  }
  const auto ann = m.directory / "annotations.csv";
  if (std::filesystem::exists(ann)) m.annotations = load_annotations_csv(ann);
  return m;
}

}  // namespace lungcad
