#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace lungcad {

// Stateless seed derivation. Every stochastic stage receives its own stream
// derived from a root seed so results do not depend on execution order.
std::uint64_t mix_seed(std::uint64_t value);
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream);

class Rng {
 public:
  using engine_type = std::mt19937_64;

  explicit Rng(std::uint64_t seed) : engine_(mix_seed(seed)) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (stddev == 0.0) return mean;
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  bool bernoulli(double p) { return uniform() < p; }
  // Inclusive range.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }
  std::uint64_t next_u64() { return engine_(); }

  // Child generator whose stream is decorrelated from this one.
  Rng fork() { return Rng(derive_seed(next_u64(), 0x9e3779b97f4a7c15ULL)); }

  engine_type& engine() { return engine_; }

 private:
  engine_type engine_;
};

}  // namespace lungcad
