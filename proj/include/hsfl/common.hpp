#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace hsfl {

// Library-level failure (bad shapes, malformed files, protocol misuse).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// splitmix64 finalizer; the standard way to spread correlated seed material.
inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Folds a list of keys (seed, purpose tag, entity id, round, step, ...) into
// one stream seed. Every random decision in the system derives from such a
// keyed stream, so results do not depend on scheduling or call interleaving.
inline uint64_t fold_seed(std::initializer_list<uint64_t> keys) {
  uint64_t h = 0x8f1bbcdcbfa53e0bull;
  for (uint64_t k : keys) h = mix64(h ^ k);
  return h;
}

// FNV-1a over raw bytes; used for order-insensitive-free bitwise checksums.
inline uint64_t fnv1a(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

// Deterministic random stream. All distributions are implemented by hand on
// top of mt19937_64 because the std::*_distribution algorithms are
// implementation-defined and would break run-to-run reproducibility across
// standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(mix64(seed)) {}

  static Rng stream(std::initializer_list<uint64_t> keys) { return Rng(fold_seed(keys)); }

  uint64_t next_u64() { return gen_(); }

  // Uniform in [0,1) with 53-bit resolution.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Unbiased integer in [0,n) by rejection.
  uint64_t below(uint64_t n) {
    if (n == 0) throw Error("Rng::below: n must be positive");
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  // Standard normal via Box-Muller (no spare caching: draw order stays
  // a pure function of call count).
  double normal() {
    double u1;
    do {
      u1 = uniform01();
    } while (u1 <= 0.0);
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Gamma(alpha, 1) via Marsaglia-Tsang, with the standard boost for alpha<1.
  double gamma(double alpha) {
    if (alpha <= 0.0) throw Error("Rng::gamma: alpha must be positive");
    if (alpha < 1.0) {
      const double g = gamma(alpha + 1.0);
      double u;
      do {
        u = uniform01();
      } while (u <= 0.0);
      return g * std::pow(u, 1.0 / alpha);
    }
    const double d = alpha - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform01();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  // Dirichlet(concentration, ..., concentration) over k categories.
  std::vector<double> dirichlet(double concentration, int k) {
    if (k <= 0) throw Error("Rng::dirichlet: k must be positive");
    std::vector<double> out(static_cast<size_t>(k));
    double total = 0.0;
    for (auto& v : out) {
      v = gamma(concentration);
      total += v;
    }
    if (total <= 0.0) {
      // All mass collapsed below double precision; fall back to uniform.
      for (auto& v : out) v = 1.0 / k;
      return out;
    }
    for (auto& v : out) v /= total;
    return out;
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // k distinct values from {0,...,n-1}, returned sorted.
  std::vector<int> sample_without_replacement(int n, int k) {
    if (k < 0 || k > n) throw Error("Rng::sample_without_replacement: need 0 <= k <= n");
    std::vector<int> pool(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
    shuffle(pool);
    pool.resize(static_cast<size_t>(k));
    std::sort(pool.begin(), pool.end());
    return pool;
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace hsfl
