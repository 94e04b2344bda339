#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "tensor.hpp"

namespace dsarf {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& s) {
  s += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
}  // namespace detail

/// Counter-based generator: identical seed produces a bit-identical stream
/// on every run (no library distributions involved).
struct Rng {
  std::uint64_t state;

  explicit Rng(std::uint64_t seed) : state(seed) {}

  std::uint64_t next_u64() { return detail::splitmix64(state); }

  /// uniform on the open interval (0, 1)
  double uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// standard normal via Box-Muller (one draw per pair of uniforms)
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// categorical draw from probabilities summing to ~1
  int categorical(std::span<const double> p) {
    double u = uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      acc += p[i];
      if (u <= acc) return static_cast<int>(i);
    }
    return static_cast<int>(p.size()) - 1;
  }
};

/// Stateless stream derivation so that every stochastic quantity in a run is
/// a pure function of (base seed, purpose indices). Checkpoint resume replays
/// the identical streams from the epoch index alone.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0,
                                 std::uint64_t c = 0) {
  std::uint64_t s = base;
  detail::splitmix64(s);
  s ^= 0x9E3779B97F4A7C15ULL + a;
  detail::splitmix64(s);
  s ^= 0xC2B2AE3D27D4EB4FULL + b;
  detail::splitmix64(s);
  s ^= 0x165667B19E3779F9ULL + c;
  return detail::splitmix64(s);
}

inline std::uint64_t name_seed(std::uint64_t base, const std::string& name) {
  // FNV-1a over the name, mixed with the base seed
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 0x100000001B3ULL;
  }
  return derive_seed(base, h);
}

/// i.i.d. standard normal draws; same (shape, seed) gives the same bits.
inline Tensor sample_gaussian(std::vector<std::size_t> shape, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (auto& x : t.v) x = rng.normal();
  return t;
}

}  // namespace dsarf
