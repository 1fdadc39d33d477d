#pragma once

#include "kpp/tensor.hpp"

#include <cstdint>
#include <random>

namespace kpp {

/// Seeded generator shared by every stochastic step; one instance per owner, never shared across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  Tensor normal(Shape shape, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = dist(engine_);
    return t;
  }

  Tensor uniform(Shape shape, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    Tensor t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = dist(engine_);
    return t;
  }

  double uniform01() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  Index uniform_index(Index n) { return std::uniform_int_distribution<Index>(0, n - 1)(engine_); }
  long poisson(double mean) { return mean <= 0.0 ? 0 : std::poisson_distribution<long>(mean)(engine_); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

/// Mixes a base seed with a stream id so derived generators do not overlap.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace kpp
