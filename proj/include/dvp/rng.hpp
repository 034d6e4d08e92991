#pragma once

#include <cmath>
#include <cstdint>

namespace dvp {

// splitmix64 stream. Hand-rolled distributions keep byte-level determinism
// independent of the standard library implementation.
struct Rng {
  uint64_t state = 0;

  Rng() = default;
  explicit Rng(uint64_t seed) : state(seed) {}

  uint64_t next() {
    uint64_t z = (state += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }
  int uniform_int(int n) { return static_cast<int>(next() % static_cast<uint64_t>(n)); }

  double gauss() {
    // Box-Muller without caching; one output per two draws.
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Independent child stream, e.g. per dataset example.
  static Rng child(uint64_t master, uint64_t stream) {
    Rng mix(master ^ (0xD1B54A32D192ED03ull * (stream + 1)));
    mix.next();
    return Rng(mix.next());
  }
};

}  // namespace dvp
