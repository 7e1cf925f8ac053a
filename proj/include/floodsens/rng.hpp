#pragma once

// Counter-based random numbers. Every variate is a pure function of a key and a
// few counters, so a single cell of a noise grid or a single bootstrap replicate can
// be regenerated without replaying a stream, and results do not depend on how work
// is split between threads.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

namespace floodsens {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t hash_counters(std::uint64_t key, std::uint64_t a,
                                             std::uint64_t b = 0, std::uint64_t c = 0) noexcept {
  std::uint64_t x = splitmix64(key);
  x = splitmix64(x ^ a);
  x = splitmix64(x ^ (b + 0x632be59bd9b4e019ULL));
  x = splitmix64(x ^ (c + 0x8cb92ba72f3d8dd7ULL));
  return x;
}

/// Uniform in (0, 1): 53 random bits, offset by half an ulp so 0 never occurs.
inline constexpr double to_unit_open(std::uint64_t bits) noexcept {
  return (static_cast<double>(bits >> 11) + 0.5) * 0x1.0p-53;
}

/// Standard normal variate for the counter tuple (Box-Muller, cosine branch).
inline double counter_normal(std::uint64_t key, std::uint64_t a, std::uint64_t b) noexcept {
  const double u1 = to_unit_open(hash_counters(key, a, b, 0));
  const double u2 = to_unit_open(hash_counters(key, a, b, 1));
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

/// Small sequential generator (splitmix64 stream) with portable bounded draws.
/// std::uniform_int_distribution and std::shuffle are implementation-defined, so
/// plans built with them would differ between standard libraries.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;
  explicit SplitMix64(std::uint64_t seed) noexcept : state_(seed) {}

  std::uint64_t operator()() noexcept {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  static constexpr std::uint64_t min() noexcept { return 0; }
  static constexpr std::uint64_t max() noexcept { return ~std::uint64_t{0}; }

  /// Uniform integer in [0, n), unbiased (rejection on the top remainder).
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = max() - max() % n;
    std::uint64_t x;
    do {
      x = (*this)();
    } while (x >= limit);
    return x % n;
  }

  double uniform() noexcept { return to_unit_open((*this)()); }

  double normal() noexcept {
    const double u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t state_;
};

template <typename T>
void shuffle(std::vector<T>& v, SplitMix64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(v[i - 1], v[j]);
  }
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  SplitMix64 rng(seed);
  shuffle(p, rng);
  return p;
}

}  // namespace floodsens
