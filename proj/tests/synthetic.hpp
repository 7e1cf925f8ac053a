#pragma once

// Synthetic sample generators shared by the unit and acceptance tests.

#include <cmath>
#include <vector>

#include "floodsens/gsa.hpp"

namespace floodsens::testing {

/// Population variance of the integers lo..hi (uniform).
inline double uniform_level_variance(int lo, int hi) {
  const double k = hi - lo + 1;
  return (k * k - 1.0) / 12.0;
}

/// Full factorial over S in 1..ns, R in 1..nr, E in 0..ne-1 with Y = f(spec).
template <typename F>
std::vector<Sample> full_factorial(int ns, int nr, int ne, F&& f) {
  std::vector<Sample> out;
  for (int s = 1; s <= ns; ++s)
    for (int e = 0; e < ne; ++e)
      for (int r = 1; r <= nr; ++r) out.push_back({{s, e, r}, f(DemSpec{s, e, r})});
  return out;
}

/// n i.i.d. draws: S uniform on 1..4, R uniform on 1..5, E uniform on 0..99,
/// Y = a*S + b*R + sigma*N(0,1).
inline std::vector<Sample> additive_campaign(std::size_t n, double a, double b, double sigma, std::uint64_t seed) {
  SplitMix64 rng(seed);
  std::vector<Sample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    DemSpec s{1 + static_cast<int>(rng.below(4)), static_cast<int>(rng.below(100)), 1 + static_cast<int>(rng.below(5))};
    out.push_back({s, a * s.s_level + b * s.r_factor + sigma * rng.normal()});
  }
  return out;
}

/// Population first-order index of S for additive_campaign.
inline double additive_si_s(double a, double b, double sigma) {
  const double vs = a * a * uniform_level_variance(1, 4), vr = b * b * uniform_level_variance(1, 5);
  return vs / (vs + vr + sigma * sigma);
}

/// Direct conditional-expectation computation: for each sample, E(Y | X = x_i) as the
/// mean over all samples sharing its level; Si = population variance of those over the
/// population variance of Y.
inline double double_loop_si(const std::vector<Sample>& v, Factor f) {
  const std::size_t n = v.size();
  double ybar = 0.0;
  for (const auto& s : v) ybar += s.y;
  ybar /= static_cast<double>(n);
  double vy = 0.0, vc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double sum = 0.0;
    std::size_t cnt = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (level_of(v[j].spec, f) == level_of(v[i].spec, f)) {
        sum += v[j].y;
        ++cnt;
      }
    const double c = sum / static_cast<double>(cnt);
    vc += (c - ybar) * (c - ybar);
    vy += (v[i].y - ybar) * (v[i].y - ybar);
  }
  return vc / vy;
}

}  // namespace floodsens::testing
