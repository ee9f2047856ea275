#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

namespace demorl {

/// The single pseudo-random engine used everywhere. Its text form
/// (operator<< / operator>>) is what checkpoints persist.
using Rng = std::mt19937_64;

/// Uniform in [0, 1) with 53 random bits. Stateless apart from the engine,
/// so a saved engine state resumes the exact stream.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer in [0, n). n must be positive.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

/// Standard normal via Box-Muller; draws two uniforms per call and caches nothing.
inline double standard_normal(Rng& rng) {
  const double u1 = 1.0 - uniform01(rng);  // (0, 1]
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

/// Derives an independent stream from a base seed and a purpose tag.
inline Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

std::string rng_to_string(const Rng& rng);
Rng rng_from_string(const std::string& text);

}  // namespace demorl
