#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>

namespace ptsr::rng {

// splitmix64 finalizer; used to derive independent stream seeds so that
// per-user / per-epoch streams do not depend on iteration order.
inline std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive(std::uint64_t seed, std::uint64_t stream) {
  return mix(seed + 0x632be59bd9b4e019ULL * (stream + 1));
}

using Engine = std::mt19937_64;

inline Engine engine(std::uint64_t seed) { return Engine(seed); }

// Uniform in [0, 1) with 53-bit resolution. std::*_distribution is
// implementation-defined, so all sampling goes through these helpers.
inline double uniform(Engine& g) {
  return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

// Unbiased uniform integer in [0, n). n must be positive.
inline std::uint64_t below(Engine& g, std::uint64_t n) {
  const std::uint64_t max = std::numeric_limits<std::uint64_t>::max();
  const std::uint64_t limit = max - max % n;
  std::uint64_t x = g();
  while (x >= limit) x = g();
  return x % n;
}

// Standard normal via Box-Muller. Draws two uniforms per call and discards
// the second variate; stateless, so call sequences stay reproducible.
inline double normal(Engine& g) {
  const double u1 = uniform(g);
  const double u2 = uniform(g);
  const double r = std::sqrt(-2.0 * std::log1p(-u1));
  return r * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace ptsr::rng
