#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

namespace fieldsynth {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t seed, std::uint64_t value) {
  return mix64(seed ^ mix64(value));
}

// Uniform double in (0, 1] from the top 53 bits.
inline double to_unit_open0(std::uint64_t bits) {
  return (static_cast<double>(bits >> 11) + 1.0) * 0x1.0p-53;
}

inline double to_unit(std::uint64_t bits) {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

// Counter-based stream: the value at (key, counter) never depends on the
// order in which counters are visited.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key) : key_(mix64(key)) {}

  std::uint64_t bits(std::uint64_t counter) const {
    return hash_combine(key_, counter);
  }

  double uniform(std::uint64_t counter) const { return to_unit(bits(counter)); }

  // Two independent standard normals (Box-Muller) for one counter.
  std::pair<double, double> normal_pair(std::uint64_t counter) const {
    const double u1 = to_unit_open0(bits(2 * counter));
    const double u2 = to_unit(bits(2 * counter + 1));
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    return {r * std::cos(theta), r * std::sin(theta)};
  }

 private:
  std::uint64_t key_;
};

// Sequential generator for places that draw a stream (initialization,
// patch sampling). Same output on every platform.
class SeqRng {
 public:
  explicit SeqRng(std::uint64_t seed) : rng_(seed) {}

  std::uint64_t next() { return rng_.bits(counter_++); }
  double uniform() { return to_unit(next()); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t v;
    do {
      v = next();
    } while (v >= limit);
    return v % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = to_unit_open0(next());
    const double u2 = to_unit(next());
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  CounterRng rng_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace fieldsynth
