// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace btel {

// All randomness in a run flows from one global seed through named
// substreams, so independent workers (members, sentences, rounds) can
// draw without sharing engine state. Derivation is splitmix64 over the
// root seed mixed with an fnv1a hash of the stream name, which is stable
// across platforms and releases.

constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t substream(std::uint64_t root, std::string_view name) {
  return splitmix64(root ^ fnv1a64(name));
}

inline std::uint64_t substream(std::uint64_t root, std::string_view name,
                               std::uint64_t index) {
  return splitmix64(splitmix64(root ^ fnv1a64(name)) + index);
}

inline std::uint64_t substream(std::uint64_t root, std::string_view name,
                               std::uint64_t i, std::uint64_t j) {
  return splitmix64(substream(root, name, i) + splitmix64(j));
}

// Thin deterministic distributions over std::mt19937_64 (the engine is
// bit-exact per the standard; the std:: distributions are not, so we
// implement our own).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53-bit resolution.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). n must be > 0; modulo bias is negligible
  // for the small n used here.
  std::uint64_t uniform_index(std::uint64_t n) { return engine_() % n; }

  // Inclusive range.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(
                    uniform_index(static_cast<std::uint64_t>(hi - lo + 1)));
  }

  // Box-Muller; caches the second deviate.
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Marsaglia-Tsang gamma sampler (shape k > 0, unit scale).
  double gamma(double k) {
    if (k < 1.0) {
      const double u = uniform();
      return gamma(k + 1.0) * std::pow(u > 0 ? u : 0x1.0p-53, 1.0 / k);
    }
    const double d = k - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x = gaussian();
      double v = 1.0 + c * x;
      if (v <= 0.0) continue;
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v)))
        return d * v;
    }
  }

  // Dirichlet(alpha, ..., alpha) of dimension n, written into out.
  void dirichlet(double alpha, std::vector<double>& out) {
    double total = 0.0;
    for (double& x : out) {
      x = gamma(alpha);
      total += x;
    }
    if (total <= 0.0) total = 1.0;
    for (double& x : out) x /= total;
  }

  // Draw an index from unnormalized nonnegative weights (CDF walk in
  // index order, binary64 accumulation).
  std::size_t categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    const double u = uniform() * total;
    double cum = 0.0;
    for (std::size_t i = 0; i + 1 < weights.size(); ++i) {
      cum += weights[i];
      if (u < cum) return i;
    }
    return weights.empty() ? 0 : weights.size() - 1;
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace btel
