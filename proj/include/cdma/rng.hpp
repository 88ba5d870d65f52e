#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cdma/error.hpp"

namespace cdma {

/// splitmix64 finalizer; used to decorrelate derived stream seeds.
inline uint64_t mix_seed(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Deterministic random stream. Distributions are implemented explicitly so
/// that a given seed produces the same draw sequence on every platform
/// (std::*_distribution is implementation-defined).
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : eng_(mix_seed(seed)) {}

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller (no cached second value, so the engine
  /// state alone captures the stream position).
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [0, n). Multiply-shift map; bias is < 2^-53.
  uint64_t randint(uint64_t n) {
    check(n > 0, "randint: n must be positive");
    return static_cast<uint64_t>(uniform() * static_cast<double>(n)) % n;
  }

  /// Knuth's product method; fine for the small rates used here.
  int poisson(double lambda) {
    check(lambda >= 0, "poisson: lambda must be non-negative");
    if (lambda == 0) return 0;
    double limit = std::exp(-lambda);
    double prod = 1.0;
    int k = -1;
    do {
      ++k;
      prod *= uniform();
    } while (prod > limit);
    return k;
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(randint(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::string serialize() const {
    std::ostringstream os;
    os << eng_;
    return os.str();
  }

  void deserialize(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    if (!is) throw FormatError("Rng::deserialize: malformed engine state");
  }

 private:
  std::mt19937_64 eng_;
};

/// Independent stream for sub-task `index` of a run seeded with `seed`.
inline Rng derived_rng(uint64_t seed, uint64_t index) {
  return Rng(mix_seed(seed ^ mix_seed(index + 1)));
}

}  // namespace cdma
