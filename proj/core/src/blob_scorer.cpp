#include "lungcad/blob_scorer.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <limits>

namespace lungcad {

namespace {

// FFTW planner calls are not thread-safe; executes are.
std::mutex& planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwFree {
  void operator()(void* p) const { fftw_free(p); }
};
using RealBuffer = std::unique_ptr<double[], FftwFree>;
using ComplexBuffer = std::unique_ptr<fftw_complex[], FftwFree>;

RealBuffer alloc_real(std::size_t n) { return RealBuffer(fftw_alloc_real(n)); }
ComplexBuffer alloc_complex(std::size_t n) { return ComplexBuffer(fftw_alloc_complex(n)); }

// Smallest 2^a 3^b 5^c 7^d >= n.
std::int64_t fft_size(std::int64_t n) {
  for (std::int64_t m = std::max<std::int64_t>(n, 1);; ++m) {
    std::int64_t r = m;
    for (std::int64_t p : {2, 3, 5, 7})
      while (r % p == 0) r /= p;
    if (r == 1) return m;
  }
}

struct FftShape {
  std::int64_t nx, ny, nz;
  std::size_t real_size() const { return static_cast<std::size_t>(nx * ny * nz); }
  std::size_t complex_size() const { return static_cast<std::size_t>(nz * ny * (nx / 2 + 1)); }
  friend bool operator==(const FftShape&, const FftShape&) = default;
};

class Plans {
 public:
  explicit Plans(FftShape s, double* real, fftw_complex* spec) {
    std::lock_guard lock(planner_mutex());
    forward_ = fftw_plan_dft_r2c_3d(static_cast<int>(s.nz), static_cast<int>(s.ny), static_cast<int>(s.nx), real,
                                    spec, FFTW_ESTIMATE);
    inverse_ = fftw_plan_dft_c2r_3d(static_cast<int>(s.nz), static_cast<int>(s.ny), static_cast<int>(s.nx), spec,
                                    real, FFTW_ESTIMATE);
    require(forward_ && inverse_, ErrorKind::kInternal, "FFTW planning failed");
  }
  ~Plans() {
    std::lock_guard lock(planner_mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(inverse_);
  }
  Plans(const Plans&) = delete;
  Plans& operator=(const Plans&) = delete;

  void forward() const { fftw_execute(forward_); }
  void inverse() const { fftw_execute(inverse_); }

 private:
  fftw_plan forward_ = nullptr;
  fftw_plan inverse_ = nullptr;
};

}  // namespace

struct BlobScorer::SpectrumCache {
  struct Entry {
    FftShape shape;
    Vec3 spacing;
    std::vector<ComplexBuffer> spectra;  // one per kernel radius
    std::vector<double> counts;          // voxels per ball
  };
  std::mutex mutex;
  std::deque<std::shared_ptr<const Entry>> entries;
  static constexpr std::size_t kMaxEntries = 3;
};

double logistic(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void BlobScorerParams::validate() const {
  require(!radii_mm.empty(), ErrorKind::kConfiguration, "blob scorer needs at least one radius");
  for (double r : radii_mm) {
    require(r > 0.0 && std::isfinite(r), ErrorKind::kConfiguration, "blob scorer radii must be positive");
  }
  require(std::isfinite(threshold) && std::isfinite(steepness), ErrorKind::kConfiguration,
          "blob scorer threshold and steepness must be finite");
}

BlobScorer::BlobScorer(BlobScorerParams params)
    : params_(std::move(params)), cache_(std::make_unique<SpectrumCache>()) {
  params_.validate();
  for (double r : params_.radii_mm) {
    kernel_radii_.push_back(r);
    kernel_radii_.push_back(2.0 * r);
  }
  std::sort(kernel_radii_.begin(), kernel_radii_.end());
  kernel_radii_.erase(std::unique(kernel_radii_.begin(), kernel_radii_.end(),
                                  [](double a, double b) { return std::abs(a - b) < 1e-9; }),
                      kernel_radii_.end());
}

BlobScorer::~BlobScorer() = default;

std::int64_t BlobScorer::fov_radius(const Vec3& spacing) const {
  const double rmax = *std::max_element(params_.radii_mm.begin(), params_.radii_mm.end());
  const double finest = std::min({spacing.x, spacing.y, spacing.z});
  return static_cast<std::int64_t>(std::ceil(2.0 * rmax / finest - 1e-9));
}

Grid3 BlobScorer::contrast(const Grid3& block) const {
  const Geometry& g = block.geometry();
  const double rmax = kernel_radii_.back();
  std::int64_t pad[3];
  for (int a = 0; a < 3; ++a) pad[a] = static_cast<std::int64_t>(std::ceil(rmax / g.spacing[a] - 1e-9));
  const FftShape fs{fft_size(g.shape.nx + 2 * pad[0]), fft_size(g.shape.ny + 2 * pad[1]),
                    fft_size(g.shape.nz + 2 * pad[2])};

  auto real = alloc_real(fs.real_size());
  auto image_spec = alloc_complex(fs.complex_size());
  auto work_spec = alloc_complex(fs.complex_size());
  Plans plans(fs, real.get(), work_spec.get());

  // Kernel spectra depend only on the FFT shape and spacing.
  std::shared_ptr<const SpectrumCache::Entry> entry;
  {
    std::lock_guard lock(cache_->mutex);
    for (const auto& e : cache_->entries) {
      if (e->shape == fs && e->spacing == g.spacing) entry = e;
    }
  }
  if (!entry) {
    auto e = std::make_shared<SpectrumCache::Entry>();
    e->shape = fs;
    e->spacing = g.spacing;
    for (double r : kernel_radii_) {
      std::fill(real.get(), real.get() + fs.real_size(), 0.0);
      double count = 0.0;
      std::int64_t ext[3];
      for (int a = 0; a < 3; ++a) ext[a] = static_cast<std::int64_t>(std::floor(r / g.spacing[a] + 1e-9));
      for (std::int64_t dz = -ext[2]; dz <= ext[2]; ++dz)
        for (std::int64_t dy = -ext[1]; dy <= ext[1]; ++dy)
          for (std::int64_t dx = -ext[0]; dx <= ext[0]; ++dx) {
            const double d2 = std::pow(dx * g.spacing.x, 2) + std::pow(dy * g.spacing.y, 2) +
                              std::pow(dz * g.spacing.z, 2);
            if (d2 > r * r * (1.0 + 1e-12)) continue;
            const auto ix = (dx + fs.nx) % fs.nx, iy = (dy + fs.ny) % fs.ny, iz = (dz + fs.nz) % fs.nz;
            real[static_cast<std::size_t>((iz * fs.ny + iy) * fs.nx + ix)] = 1.0;
            count += 1.0;
          }
      plans.forward();
      auto spec = alloc_complex(fs.complex_size());
      std::memcpy(spec.get(), work_spec.get(), fs.complex_size() * sizeof(fftw_complex));
      e->spectra.push_back(std::move(spec));
      e->counts.push_back(count);
    }
    std::lock_guard lock(cache_->mutex);
    cache_->entries.push_back(e);
    if (cache_->entries.size() > SpectrumCache::kMaxEntries) cache_->entries.pop_front();
    entry = e;
  }

  // Edge-replicated embedding of the block at offset `pad`.
  std::fill(real.get(), real.get() + fs.real_size(), 0.0);
  const Shape3 n = g.shape;
  for (std::int64_t z = 0; z < n.nz + 2 * pad[2]; ++z) {
    const auto sz = std::clamp<std::int64_t>(z - pad[2], 0, n.nz - 1);
    for (std::int64_t y = 0; y < n.ny + 2 * pad[1]; ++y) {
      const auto sy = std::clamp<std::int64_t>(y - pad[1], 0, n.ny - 1);
      double* row = real.get() + (z * fs.ny + y) * fs.nx;
      for (std::int64_t x = 0; x < n.nx + 2 * pad[0]; ++x) {
        const auto sx = std::clamp<std::int64_t>(x - pad[0], 0, n.nx - 1);
        row[x] = block(sx, sy, sz);
      }
    }
  }
  plans.forward();
  std::memcpy(image_spec.get(), work_spec.get(), fs.complex_size() * sizeof(fftw_complex));

  const double inv_total = 1.0 / static_cast<double>(fs.real_size());
  std::vector<Grid3> means;
  means.reserve(kernel_radii_.size());
  for (std::size_t k = 0; k < kernel_radii_.size(); ++k) {
    const fftw_complex* ks = entry->spectra[k].get();
    const fftw_complex* is = image_spec.get();
    fftw_complex* ws = work_spec.get();
    for (std::size_t i = 0; i < fs.complex_size(); ++i) {
      const double re = is[i][0] * ks[i][0] - is[i][1] * ks[i][1];
      const double im = is[i][0] * ks[i][1] + is[i][1] * ks[i][0];
      ws[i][0] = re;
      ws[i][1] = im;
    }
    plans.inverse();
    Grid3 sum(g, 0.0);
    for (std::int64_t z = 0; z < n.nz; ++z)
      for (std::int64_t y = 0; y < n.ny; ++y) {
        const double* row = real.get() + ((z + pad[2]) * fs.ny + (y + pad[1])) * fs.nx + pad[0];
        for (std::int64_t x = 0; x < n.nx; ++x) sum(x, y, z) = row[x] * inv_total;
      }
    means.push_back(std::move(sum));
  }

  auto find_kernel = [&](double r) {
    for (std::size_t k = 0; k < kernel_radii_.size(); ++k)
      if (std::abs(kernel_radii_[k] - r) < 1e-9) return k;
    fail(ErrorKind::kInternal, "missing kernel radius");
  };
  Grid3 best(g, -std::numeric_limits<double>::infinity());
  for (double r : params_.radii_mm) {
    const auto ki = find_kernel(r), ko = find_kernel(2.0 * r);
    const double ni = entry->counts[ki], no = entry->counts[ko];
    const Grid3& si = means[ki];
    const Grid3& so = means[ko];
    for (std::size_t i = 0; i < best.size(); ++i) {
      const double inner = si[i] / ni;
      const double shell = no > ni ? (so[i] - si[i]) / (no - ni) : inner;
      best[i] = std::max(best[i], inner - shell);
    }
  }
  return best;
}

ProbMap BlobScorer::score(const Grid3& block) const {
  Grid3 c = contrast(block);
  for (double& v : c.data()) v = logistic(params_.steepness * (v - params_.threshold));
  return c;
}

std::unique_ptr<VoxelScorer> reference_blob_scorer(BlobScorerParams params) {
  return std::make_unique<BlobScorer>(std::move(params));
}

}  // namespace lungcad
