#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "asymflow/matrix.hpp"

namespace asymflow {

inline std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Full generator state, enough to resume a stream exactly.
struct RngState {
  std::array<std::uint64_t, 4> s{};
  bool has_spare = false;
  double spare = 0.0;
};

/// xoshiro256** seeded through splitmix64. Normals use Box-Muller and are
/// produced in pairs; the second value of a pair is cached.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) noexcept {
    std::uint64_t sm = seed;
    for (auto& w : st_.s) w = splitmix64(sm);
    st_.has_spare = false;
    st_.spare = 0.0;
  }

  std::uint64_t next_u64() noexcept {
    auto& s = st_.s;
    const std::uint64_t result = rotl(s[1] * 5, 7) * 9;
    const std::uint64_t t = s[1] << 17;
    s[2] ^= s[0];
    s[3] ^= s[1];
    s[1] ^= s[2];
    s[0] ^= s[3];
    s[2] ^= t;
    s[3] = rotl(s[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n == 0) return 0;
    // Rejection sampling, unbiased for any n.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double normal() noexcept {
    if (st_.has_spare) {
      st_.has_spare = false;
      return st_.spare;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    st_.spare = radius * std::sin(angle);
    st_.has_spare = true;
    return radius * std::cos(angle);
  }

  /// Independent generator for a sub-stream; does not advance this one.
  Rng split(std::uint64_t stream) const noexcept {
    std::uint64_t sm = st_.s[0] ^ (stream * 0xD1B54A32D192ED03ULL) ^ st_.s[3];
    return Rng(splitmix64(sm));
  }

  const RngState& state() const noexcept { return st_; }
  void set_state(const RngState& st) noexcept { st_ = st; }

 private:
  static constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept {
    return (x << k) | (x >> (64 - k));
  }

  RngState st_;
};

inline Vector sample_gaussian(Rng& rng, std::size_t n) {
  Vector v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

inline Matrix sample_gaussian(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (auto& x : m.data()) x = rng.normal();
  return m;
}

}  // namespace asymflow
