#include "lungcad/candidates.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "lungcad/csv.hpp"

namespace lungcad {

namespace {

constexpr std::int64_t kFaceOffsets[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};

}  // namespace

double equivalent_diameter(double volume_mm3) { return std::cbrt(6.0 * volume_mm3 / std::numbers::pi); }

VoxelMask threshold(const ProbMap& pm, double t) {
  require(t >= 0.0 && t <= 1.0, ErrorKind::kValidation, "threshold must lie in [0, 1]");
  VoxelMask m(pm.geometry(), 0);
  for (std::size_t i = 0; i < pm.size(); ++i) m[i] = pm[i] > t ? 1 : 0;
  return m;
}

VoxelMask binary_erosion(const VoxelMask& mask) {
  VoxelMask out(mask.geometry(), 0);
  for (std::int64_t z = 0; z < mask.nz(); ++z)
    for (std::int64_t y = 0; y < mask.ny(); ++y)
      for (std::int64_t x = 0; x < mask.nx(); ++x) {
        if (!mask(x, y, z)) continue;
        bool keep = true;
        for (const auto& o : kFaceOffsets) {
          const auto nx = x + o[0], ny = y + o[1], nz = z + o[2];
          if (!mask.in_bounds(nx, ny, nz) || !mask(nx, ny, nz)) {
            keep = false;
            break;
          }
        }
        out(x, y, z) = keep ? 1 : 0;
      }
  return out;
}

VoxelMask binary_dilation(const VoxelMask& mask) {
  VoxelMask out = mask;
  for (std::int64_t z = 0; z < mask.nz(); ++z)
    for (std::int64_t y = 0; y < mask.ny(); ++y)
      for (std::int64_t x = 0; x < mask.nx(); ++x) {
        if (!mask(x, y, z)) continue;
        for (const auto& o : kFaceOffsets) {
          const auto nx = x + o[0], ny = y + o[1], nz = z + o[2];
          if (mask.in_bounds(nx, ny, nz)) out(nx, ny, nz) = 1;
        }
      }
  return out;
}

VoxelMask binary_opening(const VoxelMask& mask) { return binary_dilation(binary_erosion(mask)); }

Labeling connected_components(const VoxelMask& mask) {
  Labeling out{Image3<std::int32_t>(mask.geometry(), 0), 0};
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || out.labels[start] != 0) continue;
    const std::int32_t label = ++out.count;
    out.labels[start] = label;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const Index3 p = mask.unravel(i);
      for (const auto& o : kFaceOffsets) {
        const auto nx = p.x + o[0], ny = p.y + o[1], nz = p.z + o[2];
        if (!mask.in_bounds(nx, ny, nz)) continue;
        const auto j = mask.index(nx, ny, nz);
        if (mask[j] && out.labels[j] == 0) {
          out.labels[j] = label;
          stack.push_back(j);
        }
      }
    }
  }
  return out;
}

std::vector<Candidate> extract_candidates(const ProbMap& pm, double t, const std::string& patient_id) {
  const VoxelMask opened = binary_opening(threshold(pm, t));
  const Labeling lab = connected_components(opened);
  struct Accum {
    double wsum = 0, wx = 0, wy = 0, wz = 0, score_sum = 0, max_score = 0;
    std::size_t count = 0;
  };
  std::vector<Accum> acc(static_cast<std::size_t>(lab.count));
  for (std::size_t i = 0; i < pm.size(); ++i) {
    const auto l = lab.labels[i];
    if (l == 0) continue;
    Accum& a = acc[static_cast<std::size_t>(l - 1)];
    const Index3 p = pm.unravel(i);
    const double s = pm[i];
    a.wsum += s;
    a.wx += s * static_cast<double>(p.x);
    a.wy += s * static_cast<double>(p.y);
    a.wz += s * static_cast<double>(p.z);
    a.score_sum += s;
    a.max_score = std::max(a.max_score, s);
    ++a.count;
  }
  const Geometry& g = pm.geometry();
  const Resolution res = resolution_of(g);
  std::vector<Candidate> out;
  out.reserve(acc.size());
  for (const Accum& a : acc) {
    Candidate c;
    c.patient_id = patient_id;
    c.center_voxel = {a.wx / a.wsum, a.wy / a.wsum, a.wz / a.wsum};
    c.center_world = g.voxel_to_world(c.center_voxel);
    c.voxel_count = a.count;
    c.volume_mm3 = static_cast<double>(a.count) * g.voxel_volume_mm3();
    c.equivalent_diameter_mm = equivalent_diameter(c.volume_mm3);
    c.mean_score = std::min(a.score_sum / static_cast<double>(a.count), a.max_score);
    c.max_score = a.max_score;
    c.resolution = res;
    out.push_back(std::move(c));
  }
  return out;
}

bool hit_test(Vec3 center_world, const NoduleAnnotation& a) {
  return distance(center_world, a.center_world) < a.diameter_mm / 2.0;
}

bool hit_test(const Candidate& c, const NoduleAnnotation& a) { return hit_test(c.center_world, a); }

SegmentationMetrics segmentation_metrics(const VoxelMask& pred, const VoxelMask& gt) {
  require(pred.shape() == gt.shape(), ErrorKind::kValidation, "segmentation masks differ in shape");
  double p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    p += a;
    g += b;
    both += a && b;
  }
  SegmentationMetrics m;
  m.precision = p > 0 ? both / p : (g == 0 ? 1.0 : 0.0);
  m.recall = g > 0 ? both / g : (p == 0 ? 1.0 : 0.0);
  m.dice = (p + g) > 0 ? 2.0 * both / (p + g) : 1.0;
  return m;
}

void save_candidates_csv(const std::filesystem::path& path, const std::vector<Candidate>& candidates) {
  std::ostringstream out;
  out << "patient_id,x_mm,y_mm,z_mm,voxels,diameter_mm,mean_score,max_score,resolution\n";
  for (const auto& c : candidates) {
    out << c.patient_id << ',' << csv::format_double(c.center_world.x) << ','
        << csv::format_double(c.center_world.y) << ',' << csv::format_double(c.center_world.z) << ','
        << c.voxel_count << ',' << csv::format_double(c.equivalent_diameter_mm) << ','
        << csv::format_double(c.mean_score) << ',' << csv::format_double(c.max_score) << ','
        << to_string(c.resolution) << '\n';
  }
  csv::write_atomic(path, out.str());
}

std::vector<Candidate> load_candidates_csv(const std::filesystem::path& path) {
  const csv::Table t = csv::read_file(path);
  const std::vector<std::string> expected = {"patient_id", "x_mm",       "y_mm",      "z_mm",      "voxels",
                                             "diameter_mm", "mean_score", "max_score", "resolution"};
  require(t.header == expected, ErrorKind::kParse, path.string() + ": unexpected candidate CSV header");
  std::vector<Candidate> out;
  for (const auto& [line, f] : t.rows) {
    require(f.size() == expected.size(), ErrorKind::kParse,
            path.string() + " row " + std::to_string(line) + ": expected 9 fields");
    Candidate c;
    c.patient_id = f[0];
    const double nan = std::numeric_limits<double>::quiet_NaN();
    c.center_voxel = {nan, nan, nan};
    c.center_world = {csv::parse_double(f[1], "x_mm", line), csv::parse_double(f[2], "y_mm", line),
                      csv::parse_double(f[3], "z_mm", line)};
    const auto voxels = csv::parse_int(f[4], "voxels", line);
    require(voxels >= 1, ErrorKind::kValidation, path.string() + " row " + std::to_string(line) + ": voxels < 1");
    c.voxel_count = static_cast<std::size_t>(voxels);
    c.equivalent_diameter_mm = csv::parse_double(f[5], "diameter_mm", line);
    c.volume_mm3 = std::numbers::pi * std::pow(c.equivalent_diameter_mm, 3) / 6.0;
    c.mean_score = csv::parse_double(f[6], "mean_score", line);
    c.max_score = csv::parse_double(f[7], "max_score", line);
    require(c.mean_score >= 0.0 && c.mean_score <= c.max_score && c.max_score <= 1.0, ErrorKind::kValidation,
            path.string() + " row " + std::to_string(line) + ": scores must satisfy 0 <= mean <= max <= 1");
    try {
      c.resolution = resolution_from_string(f[8]);
    } catch (const Error& e) {
      fail(ErrorKind::kParse, path.string() + " row " + std::to_string(line) + ": " + e.what());
    }
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace lungcad
