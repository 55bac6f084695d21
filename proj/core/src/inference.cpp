#include "lungcad/inference.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "lungcad/preprocess.hpp"

namespace lungcad {

void TilingConfig::validate() const {
  require(margin >= 0, ErrorKind::kConfiguration, "tiling margin must be non-negative");
  for (int a = 0; a < 3; ++a) {
    require(block_shape[a] > 2 * margin, ErrorKind::kConfiguration,
            "tiling block extent must exceed twice the margin");
  }
}

namespace {

struct Segment {
  std::int64_t start, extent, interior_lo, interior_hi;
};

// Per-axis tiling. Interiors are cut at m + floor(j (n - 2m) / t) so that
// every interior is at most (block - 2m) wide, away from the volume border,
// and each block reaches at least `m` past both ends of its interior.
std::vector<Segment> split_axis(std::int64_t n, std::int64_t block, std::int64_t m) {
  if (n <= block) return {{0, n, 0, n}};
  const std::int64_t inner = block - 2 * m;
  const std::int64_t t = (n - 2 * m + inner - 1) / inner;
  std::vector<std::int64_t> cuts(static_cast<std::size_t>(t + 1));
  cuts[0] = 0;
  cuts[static_cast<std::size_t>(t)] = n;
  for (std::int64_t j = 1; j < t; ++j) cuts[static_cast<std::size_t>(j)] = m + j * (n - 2 * m) / t;
  std::vector<Segment> out;
  for (std::int64_t j = 0; j < t; ++j) {
    const auto lo = cuts[static_cast<std::size_t>(j)];
    const auto hi = cuts[static_cast<std::size_t>(j + 1)];
    const auto start = std::clamp<std::int64_t>(lo - m, 0, n - block);
    out.push_back({start, block, lo, hi});
  }
  return out;
}

}  // namespace

std::vector<TileBlock> split_blocks(Shape3 shape, const TilingConfig& cfg) {
  cfg.validate();
  require(!shape.empty(), ErrorKind::kValidation, "cannot tile an empty volume");
  const auto sx = split_axis(shape.nx, cfg.block_shape.nx, cfg.margin);
  const auto sy = split_axis(shape.ny, cfg.block_shape.ny, cfg.margin);
  const auto sz = split_axis(shape.nz, cfg.block_shape.nz, cfg.margin);
  std::vector<TileBlock> blocks;
  blocks.reserve(sx.size() * sy.size() * sz.size());
  for (const auto& z : sz)
    for (const auto& y : sy)
      for (const auto& x : sx) {
        blocks.push_back({{x.start, y.start, z.start},
                          {x.extent, y.extent, z.extent},
                          {x.interior_lo, y.interior_lo, z.interior_lo},
                          {x.interior_hi, y.interior_hi, z.interior_hi}});
      }
  return blocks;
}

namespace {

double axis_weight(std::int64_t offset, std::int64_t extent, std::int64_t local, std::int64_t n,
                   std::int64_t margin, std::int64_t fov) {
  std::int64_t d = std::numeric_limits<std::int64_t>::max();
  if (offset > 0) d = std::min(d, local);
  if (offset + extent < n) d = std::min(d, extent - 1 - local);
  if (d == std::numeric_limits<std::int64_t>::max()) return 1.0;
  if (d < fov) return 0.0;
  if (d >= margin - 1) return 1.0;
  return static_cast<double>(d - fov + 1) / static_cast<double>(margin - fov);
}

}  // namespace

double stitch_weight(const TileBlock& block, Index3 local, Shape3 volume_shape, std::int64_t margin,
                     std::int64_t fov_radius) {
  double w = 1.0;
  for (int a = 0; a < 3; ++a) {
    w *= axis_weight(block.offset[a], block.extent[a], local[a], volume_shape[a], margin, fov_radius);
  }
  return w;
}

ProbMap stitch(const std::vector<ProbMap>& block_outputs, const std::vector<TileBlock>& blocks,
               const Geometry& geometry, const TilingConfig& cfg, std::int64_t fov_radius) {
  require(block_outputs.size() == blocks.size(), ErrorKind::kInternal, "block output count mismatch");
  const Shape3 shape = geometry.shape;
  Grid3 acc(geometry, 0.0);
  Grid3 wsum(geometry, 0.0);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const TileBlock& blk = blocks[b];
    const ProbMap& out = block_outputs[b];
    require(out.shape() == blk.extent, ErrorKind::kInternal, "block output shape mismatch");
    // Separable weights: compute per-axis tables once.
    std::vector<double> w[3];
    for (int a = 0; a < 3; ++a) {
      w[a].resize(static_cast<std::size_t>(blk.extent[a]));
      for (std::int64_t i = 0; i < blk.extent[a]; ++i) {
        w[a][static_cast<std::size_t>(i)] =
            axis_weight(blk.offset[a], blk.extent[a], i, shape[a], cfg.margin, fov_radius);
      }
    }
    for (std::int64_t z = 0; z < blk.extent.nz; ++z)
      for (std::int64_t y = 0; y < blk.extent.ny; ++y) {
        const double wyz = w[1][static_cast<std::size_t>(y)] * w[2][static_cast<std::size_t>(z)];
        if (wyz == 0.0) continue;
        for (std::int64_t x = 0; x < blk.extent.nx; ++x) {
          const double wt = wyz * w[0][static_cast<std::size_t>(x)];
          if (wt == 0.0) continue;
          const auto i = acc.index(blk.offset.x + x, blk.offset.y + y, blk.offset.z + z);
          acc[i] += wt * out(x, y, z);
          wsum[i] += wt;
        }
      }
  }
  for (std::size_t i = 0; i < acc.size(); ++i) {
    require(wsum[i] > 0.0, ErrorKind::kInternal, "voxel not covered by any tile");
    acc[i] /= wsum[i];
  }
  return acc;
}

ProbMap score_volume(const CtVolume& volume, const VoxelScorer& scorer, const TilingConfig& cfg, int jobs) {
  cfg.validate();
  const Geometry& geom = volume.geometry();
  const auto fov = scorer.fov_radius(geom.spacing);
  const auto blocks = split_blocks(geom.shape, cfg);
  if (blocks.size() > 1) {
    require(fov <= cfg.margin, ErrorKind::kConfiguration,
            "scorer field of view (" + std::to_string(fov) + " voxels) exceeds tiling margin (" +
                std::to_string(cfg.margin) + ")");
  }
  std::vector<ProbMap> outputs(blocks.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (std::size_t b = next++; b < blocks.size(); b = next++) {
      try {
        outputs[b] = scorer.score(crop(volume.image, blocks[b].offset, blocks[b].extent));
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(blocks.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (error) std::rethrow_exception(error);
  if (blocks.size() == 1) {
    outputs[0].geometry() = geom;
    return std::move(outputs[0]);
  }
  return stitch(outputs, blocks, geom, cfg, fov);
}

const char* to_string(Resolution r) { return r == Resolution::k1mm ? "1mm" : "2mm"; }

Resolution resolution_from_string(const std::string& s) {
  if (s == "1mm") return Resolution::k1mm;
  if (s == "2mm") return Resolution::k2mm;
  fail(ErrorKind::kParse, "unknown resolution tag '" + s + "'");
}

Resolution resolution_of(const Geometry& geometry) {
  const double finest = std::min({geometry.spacing.x, geometry.spacing.y, geometry.spacing.z});
  return finest >= 1.5 ? Resolution::k2mm : Resolution::k1mm;
}

CtVolume downsample_pass(const CtVolume& volume, double target_mm) {
  const auto& s = volume.geometry().spacing;
  require(std::abs(s.x - 1.0) < 1e-6 && std::abs(s.y - 1.0) < 1e-6 && std::abs(s.z - 1.0) < 1e-6,
          ErrorKind::kValidation, "downsample_pass expects a 1 mm isotropic volume");
  return resample(volume, {target_mm, target_mm, target_mm});
}

}  // namespace lungcad
