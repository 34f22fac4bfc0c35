#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace tunemark {

// splitmix64; used both as a seed mixer and for deriving child seeds.
inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic combination of a base seed with context tags. Used for
// per-(epoch, batch, phase, step) seeds so every stochastic draw in the
// pipeline is reproducible from one root seed.
inline uint64_t mix_seed(uint64_t base) {
  uint64_t s = base;
  return splitmix64(s);
}

template <typename... Rest>
inline uint64_t mix_seed(uint64_t base, uint64_t tag, Rest... rest) {
  uint64_t s = base ^ (tag + 0x9e3779b97f4a7c15ULL + (base << 6) + (base >> 2));
  return mix_seed(splitmix64(s), rest...);
}

// Seeded generator with hand-rolled transforms so that draws are
// bit-stable across standard libraries (mt19937_64 itself is specified
// by the standard; the distributions in <random> are not).
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; caches the second deviate.
  double normal() {
    if (have_cached_) {
      have_cached_ = false;
      return cached_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    have_cached_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n). Rejection sampling keeps it exact.
  uint64_t randint(uint64_t n) {
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[randint(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool have_cached_ = false;
};

}  // namespace tunemark
