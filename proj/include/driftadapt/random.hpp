#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>

#include "driftadapt/tensor.hpp"

namespace driftadapt {

/// Seeded generator whose derived draws are bit-stable across standard
/// libraries. std::mt19937_64 output is fully specified; the <random>
/// distributions are not, so uniform and normal variates are built here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer on [0, n).
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = 0;
    do {
      v = engine_();
    } while (v >= limit);
    return v % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Splits off an independent stream (for per-image or per-run seeding).
  Rng fork(std::uint64_t salt) {
    return Rng(next_u64() ^ (salt * 0x9E3779B97F4A7C15ULL));
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Tensor random_tensor(Shape shape, DType dtype, Rng& rng) {
  Tensor t(shape, dtype);
  for (double& v : t.raw()) v = rng.normal();
  return t;
}

/// Adds i.i.d. N(0, sigma^2) to every scalar (both parts of complex entries).
inline Tensor add_noise(Tensor t, double sigma, Rng& rng) {
  if (sigma <= 0.0) return t;
  for (double& v : t.raw()) v += sigma * rng.normal();
  return t;
}

}  // namespace driftadapt
