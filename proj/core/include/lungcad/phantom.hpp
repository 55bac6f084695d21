#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lungcad/rng.hpp"
#include "lungcad/volume.hpp"

namespace lungcad {

// Synthetic chest-CT phantom: Gaussian-noise parenchyma, soft-edged
// spherical nodules, and thin cylinders ("vessels") of similar density.
struct PhantomConfig {
  Shape3 shape = Shape3::cube(128);
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};

  double background_hu = -850.0;
  double background_sigma = 40.0;

  int min_nodules = 0;
  int max_nodules = 4;  // count is uniform on [min, max]
  double min_diameter_mm = 3.0;
  double max_diameter_mm = 30.0;
  // Diameter density proportional to d^-diameter_power on [min, max].
  double diameter_power = 2.0;
  double nodule_hu = -50.0;
  double nodule_hu_sd = 50.0;  // per nodule, truncated at 3 sd
  double edge_sigma_mm = 0.5;  // Gaussian edge profile width
  double border_mm = 5.0;      // minimum nodule surface to volume border

  int min_vessels = 2;
  int max_vessels = 5;
  double min_vessel_radius_mm = 0.5;
  double max_vessel_radius_mm = 1.5;
  double min_vessel_length_mm = 20.0;
  double max_vessel_length_mm = 60.0;
  double vessel_clearance_mm = 3.0;  // vessel surface to nodule surface

  double malignant_diameter_mm = 12.0;  // patient malignant iff any nodule reaches it
  int min_raters = 3;
  int max_raters = 4;

  int max_retries = 200;

  void validate() const;
};

struct Vessel {
  Vec3 a, b;  // axis end points, world mm
  double radius_mm = 0.0;
  double hu = 0.0;
};

struct Phantom {
  std::string patient_id;
  CtVolume volume;  // raw HU, integer valued
  std::vector<NoduleAnnotation> nodules;
  std::vector<Vessel> vessels;
  std::vector<double> nodule_hu;
  int label = 0;  // 1 = malignant
};

// Synthetic rater score for a nodule of diameter d:
// clamp(round(1 + 4 (d - 3) / 27) + jitter, 1, 5), jitter uniform on {-1, 0, 1}.
int synthetic_rater_score(double diameter_mm, Rng& rng);

Phantom generate_phantom(const PhantomConfig& cfg, Rng& rng, const std::string& patient_id = "phantom");

// Patient `index` of the dataset rooted at `root_seed`; identical to what
// generate_dataset writes.
std::string phantom_patient_id(std::size_t index);
Phantom generate_patient(const PhantomConfig& cfg, std::uint64_t root_seed, std::size_t index);

struct ManifestEntry {
  std::string patient_id;
  std::string volume;  // .mhd path, relative to the manifest directory
  int label = 0;
};

struct DatasetManifest {
  std::filesystem::path directory;
  std::vector<ManifestEntry> entries;
  std::vector<NoduleAnnotation> annotations;

  double prevalence() const;
  std::filesystem::path volume_path(const ManifestEntry& e) const { return directory / e.volume; }
  std::vector<NoduleAnnotation> annotations_for(const std::string& patient_id) const;
};

// Writes <out>/volumes/<id>.mhd|.raw, <out>/annotations.csv and
// <out>/manifest.csv (`patient_id,volume,label`).
DatasetManifest generate_dataset(std::size_t n_patients, const PhantomConfig& cfg, std::uint64_t root_seed,
                                 const std::filesystem::path& out_dir, int jobs = 1);

// Reads manifest.csv and, if present next to it, annotations.csv.
DatasetManifest load_manifest(const std::filesystem::path& manifest_csv);
void save_manifest(const std::filesystem::path& manifest_csv, const std::vector<ManifestEntry>& entries);

}  // namespace lungcad
