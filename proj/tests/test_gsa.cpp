#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "floodsens/gsa.hpp"
#include "synthetic.hpp"

using namespace floodsens;
using namespace floodsens::testing;
namespace fs = std::filesystem;

namespace {

RasterHeader grid(std::size_t nc, std::size_t nr, double cs) {
  RasterHeader h;
  h.ncols = nc;
  h.nrows = nr;
  h.cellsize = cs;
  h.xll = 500.0;
  h.yll = 100.0;
  return h;
}

std::vector<double> seq_a(int n) {
  std::vector<double> v;
  for (int i = 0; i < n; ++i) v.push_back((i < n / 2 ? static_cast<double>(i) / n : 3.0 + static_cast<double>(i) / n) + 0.01 * std::sin(i * 1.7));
  return v;
}
std::vector<double> seq_b(int n) {
  std::vector<double> v;
  for (int i = 0; i < n; ++i) v.push_back(std::tan(M_PI * ((i + 0.5) / n - 0.5)) * 0.3 + 0.001 * std::cos(i));
  return v;
}
std::vector<double> seq_c(int n) {
  std::vector<double> v;
  for (int i = 0; i < n; ++i) v.push_back(static_cast<double>((i * 7919) % n) / n + static_cast<double>((i * 104729) % n) / n);
  return v;
}

// A random instance where every level of every factor has >= 2 samples.
std::vector<Sample> random_instance(std::uint64_t seed, std::size_t n) {
  SplitMix64 rng(seed);
  std::vector<Sample> v;
  while (v.size() + 2 <= n) {
    DemSpec s{1 + static_cast<int>(rng.below(4)), static_cast<int>(rng.below(6)), 1 + static_cast<int>(rng.below(5))};
    const double base = 0.3 * s.s_level - 0.2 * s.r_factor + 0.05 * s.e_draw;
    v.push_back({s, base + rng.normal()});
    v.push_back({s, base + rng.normal()});
  }
  return v;
}

}  // namespace

TEST(Dip, MatchesReferenceImplementation) {
  // Reference values from an independent implementation of Hartigan's algorithm.
  struct Case {
    std::vector<double> x;
    double dip;
  };
  const std::vector<Case> cases = {
      {{0, 0.1, 0.2, 5, 5.1, 5.2}, 0.24},
      {{1, 2, 4, 8, 16, 17, 30}, 0.12698412698412698},
      {seq_a(20), 0.21665393245922115},
      {seq_a(101), 0.21244071110700818},
      {seq_a(500), 0.21358649288667683},
      {seq_b(20), 0.025},
      {seq_b(101), 0.0058564179357396395},
      {seq_b(500), 0.0020430753799516037},
      {seq_c(20), 0.075},
      {seq_c(101), 0.01320132013201318},
      {seq_c(500), 0.004866666666666666},
  };
  for (const auto& c : cases) EXPECT_NEAR(dip_statistic(c.x), c.dip, 1e-12 * c.dip) << c.x.size();
}

TEST(Dip, BoundsAndInvariances) {
  // Equally spaced points attain the floor 1/(2n).
  EXPECT_DOUBLE_EQ(dip_statistic({0, 1, 2, 3, 4}), 0.1);
  EXPECT_DOUBLE_EQ(dip_statistic({3, 3, 3}), 1.0 / 6.0);
  SplitMix64 rng(2);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(5 + rng.below(200));
    for (auto& x : v) x = rng.normal() + (rng.below(2) ? 3.0 : 0.0);
    const double d = dip_statistic(v);
    EXPECT_GE(d, 0.5 / static_cast<double>(v.size()) - 1e-15);
    EXPECT_LE(d, 0.25 + 1e-15);
    auto w = v;
    for (auto& x : w) x = -2.5 * x + 7.0;
    EXPECT_NEAR(dip_statistic(w), d, 1e-12);
  }
}

TEST(Bimodality, FlagsSeparatedMixture) {
  SplitMix64 rng(17);
  std::vector<double> v;
  for (int i = 0; i < 200; ++i) v.push_back((rng.below(2) ? 2.0 : 1.0) + 0.1 * rng.normal());
  auto r = bimodality(v, 0.05, 500);
  EXPECT_TRUE(r.bimodal) << r.dip << " vs " << r.threshold;
}

TEST(Bimodality, RarelyFlagsGaussian) {
  int flagged = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    SplitMix64 rng(seed);
    std::vector<double> v(150);
    for (auto& x : v) x = rng.normal();
    flagged += bimodality(v, 0.05, 300).bimodal;
  }
  EXPECT_LE(flagged, 5);
}

TEST(Histogram, FixedBins) {
  auto h = histogram({0.0, 0.01, 0.049, 0.05, 0.26}, 0.05);
  ASSERT_EQ(h.size(), 6u);
  EXPECT_EQ(h[0].count, 3u);
  EXPECT_EQ(h[1].count, 1u);
  EXPECT_EQ(h[5].count, 1u);
  EXPECT_DOUBLE_EQ(h[5].lo, 0.25);
}

TEST(UaStats, TwoSamplesAndNodata) {
  AlignedOutputs a;
  a.header = grid(2, 1, 5);
  a.specs = {{1, 0, 1}, {2, 0, 1}};
  a.samples = {Raster(a.header, std::vector<double>{0.0, 0.0}), Raster(a.header, std::vector<double>{1.0, 0.0})};
  auto ua = ua_stats(a);
  EXPECT_EQ(ua.mean[0], 0.5);
  EXPECT_EQ(ua.variance[0], 0.5);
  EXPECT_TRUE(ua.mean.is_nodata(1));
  a.samples[0] = a.samples[1];
  EXPECT_EQ(ua_stats(a).variance[0], 0.0);
}

TEST(Sobol, FunctionalDependenceOnS) {
  auto v = full_factorial(4, 5, 10, [](const DemSpec& s) { return std::sqrt(static_cast<double>(s.s_level)); });
  auto est = sobol_first_order(v);
  EXPECT_NEAR(est[Factor::S].value, 1.0, 1e-12);
  EXPECT_NEAR(est[Factor::R].value, 0.0, 1e-12);
  EXPECT_NEAR(est[Factor::E].value, 0.0, 1e-12);
}

TEST(Sobol, ConstantOutputIsUndefined) {
  auto v = full_factorial(4, 5, 3, [](const DemSpec&) { return 0.7; });
  auto est = sobol_first_order(v);
  EXPECT_FALSE(est.defined());
  for (Factor f : kFactors) EXPECT_EQ(est[f].status, SiStatus::undefined);
}

TEST(Sobol, AdditiveEnumerationMatchesClosedForm) {
  for (double a : {0.5, 1.0, 3.0})
    for (double b : {0.1, 1.0, 2.0}) {
      auto v = full_factorial(4, 5, 1, [&](const DemSpec& s) { return a * s.s_level + b * s.r_factor; });
      ASSERT_EQ(v.size(), 20u);
      const double vs = a * a * 1.25, vr = b * b * 2.0;
      auto est = sobol_first_order(v);
      EXPECT_NEAR(est[Factor::S].value, vs / (vs + vr), 1e-12);
      EXPECT_NEAR(est[Factor::R].value, vr / (vs + vr), 1e-12);
      EXPECT_EQ(est[Factor::E].status, SiStatus::insufficient);  // one level only
    }
}

TEST(Sobol, EqualsDoubleLoopOnSmallInstances) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto v = random_instance(seed, 20 + seed * 3);
    auto est = sobol_first_order(v);
    for (Factor f : kFactors) {
      ASSERT_EQ(est[f].status, SiStatus::ok);
      EXPECT_NEAR(est[f].value, double_loop_si(v, f), 1e-12) << "seed " << seed;
    }
  }
}

TEST(Sobol, ScaleAndPermutationInvariance) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto v = random_instance(seed + 100, 200);
    auto base = sobol_first_order(v);
    auto scaled = v;
    for (auto& s : scaled) s.y = -3.7 * s.y + 1234.5;
    auto est = sobol_first_order(scaled);
    auto shuffled = v;
    SplitMix64 rng(seed);
    shuffle(shuffled, rng);
    auto perm = sobol_first_order(shuffled);
    for (Factor f : kFactors) {
      EXPECT_NEAR(est[f].value, base[f].value, 1e-10);
      EXPECT_EQ(perm[f].value, base[f].value);
    }
  }
}

TEST(Sobol, AdditiveModelIndicesSumToOne) {
  auto v = additive_campaign(4000, 1.0, 0.8, 0.0, 5);
  auto est = sobol_first_order(v);
  EXPECT_NEAR(est[Factor::S].value + est[Factor::R].value, 1.0, 0.05);
  for (Factor f : kFactors) {
    EXPECT_GE(est[f].value, -0.05);
    EXPECT_LE(est[f].value, 1.05);
  }
}

TEST(Sobol, SingletonLevelsStrictVersusPool) {
  auto v = random_instance(3, 60);
  v.push_back({{2, 77, 3}, 1.0});
  SobolOptions strict;
  EXPECT_EQ(sobol_first_order(v, strict)[Factor::E].status, SiStatus::insufficient);
  EXPECT_EQ(sobol_first_order(v, strict)[Factor::S].status, SiStatus::ok);
  SobolOptions pool{LevelPolicy::pool, false};
  auto est = sobol_first_order(v, pool);
  EXPECT_EQ(est[Factor::E].status, SiStatus::ok);
  EXPECT_EQ(est[Factor::E].pooled_out, 1u);
  v.pop_back();
  EXPECT_NEAR(est[Factor::E].value, sobol_first_order(v)[Factor::E].value, 1e-12);
}

TEST(Sobol, BiasCorrectionRemovesNoiseFloor) {
  // Y independent of E: the plug-in index has expectation about (L-1)/n, the corrected
  // one about 0.
  double raw = 0, corrected = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto v = additive_campaign(2000, 0.0, 0.0, 1.0, seed);
    raw += sobol_first_order(v)[Factor::E].value;
    corrected += sobol_first_order(v, {LevelPolicy::strict, true})[Factor::E].value;
  }
  raw /= 20;
  corrected /= 20;
  EXPECT_NEAR(raw, 99.0 / 2000.0, 0.01);
  EXPECT_NEAR(corrected, 0.0, 0.005);
}

TEST(Bootstrap, FunctionalOutputCollapses) {
  auto v = full_factorial(4, 5, 10, [](const DemSpec& s) { return 2.0 * s.s_level; });
  auto ci = bootstrap_ci(v, 200, 200, 0.95, 1);
  EXPECT_NEAR(ci[Factor::S].low, 1.0, 1e-12);
  EXPECT_NEAR(ci[Factor::S].high, 1.0, 1e-12);
  EXPECT_TRUE(ci[Factor::S].reliable);
}

TEST(Bootstrap, DeterministicAcrossWorkers) {
  auto v = additive_campaign(500, 1, 1, 1, 9);
  auto a = bootstrap_ci(v, 300, 400, 0.95, 42, {}, 1);
  auto b = bootstrap_ci(v, 300, 400, 0.95, 42, {}, 4);
  for (std::size_t f = 0; f < 2; ++f) {
    EXPECT_EQ(a.ci[f].low, b.ci[f].low);
    EXPECT_EQ(a.ci[f].high, b.ci[f].high);
  }
  EXPECT_LE(a[Factor::S].low, a[Factor::S].high);
}

TEST(Bootstrap, WidthShrinksLikeInverseSqrtN) {
  auto v = additive_campaign(3200, 1.0, 0.7, 1.0, 4);
  std::vector<double> w;
  for (std::size_t n : {100u, 400u, 1600u}) {
    auto ci = bootstrap_ci(v, 1000, n, 0.95, 7);
    w.push_back(ci[Factor::S].high - ci[Factor::S].low);
  }
  EXPECT_GT(w[0], w[1]);
  EXPECT_GT(w[1], w[2]);
  EXPECT_NEAR(w[0] / w[1], 2.0, 0.6);
  EXPECT_NEAR(w[1] / w[2], 2.0, 0.6);
}

TEST(Bootstrap, DegenerateReplicatesMakeCiUnreliable) {
  // Each E level observed exactly twice: most resamples leave some level with one draw.
  std::vector<Sample> v;
  SplitMix64 rng(1);
  for (int e = 0; e < 100; ++e)
    for (int k = 0; k < 2; ++k) v.push_back({{1 + k, e, 1 + e % 5}, rng.normal()});
  auto ci = bootstrap_ci(v, 200, 200, 0.95, 3);
  EXPECT_FALSE(ci[Factor::E].reliable);
  EXPECT_GT(ci[Factor::E].dropped, 100u);
  EXPECT_TRUE(ci[Factor::S].reliable);
  EXPECT_THROW(bootstrap_ci(v, 10, 201, 0.95, 3), std::invalid_argument);
}

TEST(SiConvergence, FunctionalAndFeasibility) {
  auto v = full_factorial(4, 5, 100, [](const DemSpec& s) { return static_cast<double>(s.s_level * s.s_level); });
  auto series = si_convergence(v, 5, 50);
  ASSERT_FALSE(series.empty());
  EXPECT_EQ(series.front().n, 50u);
  EXPECT_EQ(series.front().estimate[Factor::E].status, SiStatus::insufficient);
  for (const auto& p : series)
    if (p.estimate[Factor::S].status == SiStatus::ok) {
      EXPECT_NEAR(p.estimate[Factor::S].value, 1.0, 1e-12);
    }
  EXPECT_EQ(series.back().n, 2000u);
  EXPECT_EQ(series.back().estimate[Factor::E].status, SiStatus::ok);
}

TEST(SiConvergence, AdditiveConvergesToAnalytic) {
  auto v = additive_campaign(3000, 1.0, 1.0, 0.5, 12);
  auto series = si_convergence(v, 3, 300);
  const double truth = additive_si_s(1.0, 1.0, 0.5);
  auto ci = bootstrap_ci(v, 500, v.size(), 0.95, 8);
  EXPECT_GE(truth, ci[Factor::S].low);
  EXPECT_LE(truth, ci[Factor::S].high);
  EXPECT_NEAR(series.back().estimate[Factor::S].value, truth, 0.03);
}

TEST(Align, PassThroughBlockMeanAndMixedResolutions) {
  std::vector<DemSpec> specs;
  std::vector<Raster> rasters;
  for (int r = 1; r <= 5; ++r) {
    RasterHeader h = grid(20 / r, 20 / r, r);
    h.yll = 120.0 - static_cast<double>(h.nrows) * r;  // common NW corner, as after resampling
    Raster y(h);
    for (std::size_t i = 0; i < y.nrows(); ++i)
      for (std::size_t j = 0; j < y.ncols(); ++j) y(i, j) = 0.1 * static_cast<double>(i) + 0.01 * static_cast<double>(j * r) + r;
    specs.push_back({1, 0, r});
    rasters.push_back(y);
  }
  auto a = align_rasters(specs, rasters, 5.0, ResampleMethod::average);
  EXPECT_EQ(a.header.ncols, 3u);  // the 3 m member covers 18 m
  EXPECT_EQ(a.header.nrows, 3u);
  EXPECT_DOUBLE_EQ(a.header.ytop(), rasters[0].header().ytop());
  // 5 m member: pass-through.
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(a.samples[4](i, j), rasters[4](i, j));
  // 1 m member: mean of 25 fine cells.
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0;
      for (std::size_t di = 0; di < 5; ++di)
        for (std::size_t dj = 0; dj < 5; ++dj) s += rasters[0](5 * i + di, 5 * j + dj);
      EXPECT_NEAR(a.samples[0](i, j), s / 25.0, 1e-12);
    }
  // 3 m member: brute-force area weights on a 5 m cell (overlaps of 3, 2 | 1, 3, 1 | ...).
  auto overlap = [](double a0, double a1, double b0, double b1) { return std::max(0.0, std::min(a1, b1) - std::max(a0, b0)); };
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      double s = 0, w = 0;
      for (std::size_t fi = 0; fi < 6; ++fi)
        for (std::size_t fj = 0; fj < 6; ++fj) {
          const double wt = overlap(5.0 * i, 5.0 * i + 5, 3.0 * fi, 3.0 * fi + 3) * overlap(5.0 * j, 5.0 * j + 5, 3.0 * fj, 3.0 * fj + 3);
          s += wt * rasters[2](fi, fj);
          w += wt;
        }
      EXPECT_NEAR(w, 25.0, 1e-12);
      EXPECT_NEAR(a.samples[2](i, j), s / w, 1e-12);
    }
}

TEST(Align, ExtentMismatchThrows) {
  Raster a(grid(10, 10, 1)), b(grid(10, 10, 1));
  RasterHeader shifted = grid(10, 10, 1);
  shifted.xll += 3;
  EXPECT_THROW(align_rasters({{1, 0, 1}, {2, 0, 1}}, {a, Raster(shifted)}, 5, ResampleMethod::average), std::invalid_argument);
  EXPECT_THROW(align_rasters({{1, 0, 1}}, {a}, 20, ResampleMethod::average), std::invalid_argument);
}

TEST(SobolMaps, ArgmaxSplitsAtConstructedBoundary) {
  AlignedOutputs a;
  a.header = grid(10, 4, 5);
  SplitMix64 rng(6);
  for (int s = 1; s <= 4; ++s)
    for (int e = 0; e < 10; ++e)
      for (int r = 1; r <= 5; ++r) {
        Raster y(a.header);
        const double noise = 0.01 * rng.normal();
        for (std::size_t i = 0; i < 4; ++i)
          for (std::size_t j = 0; j < 10; ++j) y(i, j) = (j < 5 ? 0.2 * s : 0.3 * r) + noise;
        a.specs.push_back({s, e, r});
        a.samples.push_back(std::move(y));
      }
  MapOptions opt;
  auto maps = sobol_maps(a, opt);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 10; ++j) EXPECT_EQ(maps.argmax(i, j), j < 5 ? 1.0 : 2.0);
  EXPECT_DOUBLE_EQ(maps.area_fraction[0], 0.5);
  EXPECT_DOUBLE_EQ(maps.area_fraction[1], 0.5);

  auto scaled = a;
  for (auto& y : scaled.samples)
    for (auto& v : y.values()) v = 4.0 * v + 0.5;
  EXPECT_TRUE(sobol_maps(scaled, opt).argmax == maps.argmax);

  opt.exclude_buildings = true;
  Raster fp(a.header, a.header.nodata);
  fp(0, 0) = 8.0;
  opt.building_footprint = fp;
  auto masked = sobol_maps(a, opt);
  EXPECT_TRUE(masked.argmax.is_nodata(0));
  EXPECT_EQ(masked.masked_cells, 1u);
}

TEST(SobolMaps, IndependentOutputGivesAllNodata) {
  AlignedOutputs a;
  a.header = grid(3, 3, 5);
  for (int s = 1; s <= 4; ++s)
    for (int e = 0; e < 25; ++e) {
      a.specs.push_back({s, e, 1});
      a.samples.emplace_back(a.header, 0.4);
    }
  auto maps = sobol_maps(a);
  for (std::size_t k = 0; k < 9; ++k) {
    EXPECT_TRUE(maps.argmax.is_nodata(k));
    for (const auto& r : maps.si) EXPECT_TRUE(r.is_nodata(k));
  }
  a.specs.resize(50);
  a.samples.resize(50);
  EXPECT_THROW(sobol_maps(a), std::invalid_argument);
}
