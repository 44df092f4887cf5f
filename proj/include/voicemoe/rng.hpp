#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "voicemoe/errors.hpp"

namespace voicemoe {

// Seedable pseudo-random generator used everywhere in the project.
//
// The raw stream is std::mt19937_64 (the algorithm the C++ standard pins
// down bit-exactly). All distributions are derived from it with fixed,
// documented transforms so that a given seed reproduces the same values on
// every build of this code base:
//   uniform double  (x >> 11) * 2^-53                 -> [0, 1)
//   normal          Box-Muller, two uniforms per draw
//   exponential     -log(1 - u)
//   beta(a, b)      Gamma-ratio with integer shapes, gammas as sums of
//                   exponentials
//   uniform_int     rejection sampling on the 64-bit stream (unbiased)
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 bits of mantissa.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller transform; consumes two uniforms per call.
  double normal(double mu, double sigma) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return mu + sigma * r * std::cos(2.0 * std::numbers::pi * u2);
  }

  double exponential() {
    double u = uniform();
    while (u >= 1.0) u = uniform();
    return -std::log(1.0 - u);
  }

  // Gamma with integer shape k: sum of k unit exponentials.
  double gamma_int(int k) {
    double s = 0.0;
    for (int i = 0; i < k; ++i) s += exponential();
    return s;
  }

  // Beta(a, b) for integer shapes via X/(X+Y), X~Gamma(a), Y~Gamma(b).
  double beta(int a, int b) {
    if (a < 1 || b < 1) throw ConfigError("Rng::beta requires integer shapes >= 1");
    const double x = gamma_int(a);
    const double y = gamma_int(b);
    const double s = x + y;
    return s > 0.0 ? x / s : 0.5;
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Unbiased integer in [0, n).
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ConfigError("Rng::uniform_int requires n >= 1");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  // Index sampled from an (unnormalized is not allowed) probability vector
  // by inverse-CDF scan; ties and float slack fall through to the last index.
  std::size_t categorical(std::span<const double> probs) {
    const double u = uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return i;
    }
    return probs.empty() ? 0 : probs.size() - 1;
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    if (v.size() < 2) return;
    for (std::size_t i = v.size() - 1; i > 0; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_int(i + 1));
      std::swap(v[i], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace voicemoe
