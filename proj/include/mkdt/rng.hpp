#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

#include "mkdt/tensor.hpp"

namespace mkdt {

/// splitmix64 finalizer; used to derive independent stream seeds from one
/// master seed so that adding a consumer never shifts the draws of another.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Deterministic random source. Draws go through hand-rolled transforms
/// (Box-Muller, rejection sampling) rather than the standard distribution
/// templates, whose output sequences differ between standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; the paired draw is cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps the log finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Uniform in [0, n) by rejection, so the result is exactly unbiased.
  std::size_t below(std::size_t n) {
    if (n == 0) throw std::invalid_argument("rng below: n must be positive");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t reject_under = (0ULL - bound) % bound;  // 2^64 mod n
    std::uint64_t r = next_u64();
    while (r < reject_under) r = next_u64();
    return static_cast<std::size_t>(r % bound);
  }

  /// Fisher-Yates shuffle.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    shuffle(p);
    return p;
  }

  Tensor normal_tensor(const Shape& shape, double mean = 0.0, double stddev = 1.0) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) v = normal(mean, stddev);
    return t;
  }

  Tensor uniform_tensor(const Shape& shape, double lo, double hi) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) v = uniform(lo, hi);
    return t;
  }

 private:
  std::mt19937_64 engine_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace mkdt
