#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "floodsens/dem_ensemble.hpp"

using namespace floodsens;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("floodsens_dem_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

RasterHeader header(std::size_t n) {
  RasterHeader h;
  h.ncols = n;
  h.nrows = n;
  h.cellsize = 1.0;
  return h;
}

Raster empty_layer(const RasterHeader& h) { return Raster(h, h.nodata); }

FeatureStack small_stack(std::size_t n = 10) {
  FeatureStack st;
  st.dtm = Raster(header(n), 5.0);
  for (std::size_t k = 0; k < st.dtm.size(); ++k) st.dtm[k] += 0.01 * static_cast<double>(k % n);
  Raster b = empty_layer(st.dtm.header()), w = b, t = b;
  for (std::size_t i = 2; i < 5; ++i)
    for (std::size_t j = 2; j < 6; ++j) b(i, j) = 8.0;
  for (std::size_t j = 0; j < n; ++j) w(6, j) = 1.5;
  w(3, 3) = 9.0;  // wall crossing a building: per-cell max applies
  for (std::size_t i = 0; i < n; ++i) t(i, 8) = 0.15;
  st.layers = {{"buildings", b}, {"walls", w}, {"thin_structures", t}};
  return st;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(ComposeSurface, LevelOneIsDtm) {
  auto st = small_stack();
  EXPECT_TRUE(compose_surface(st, 1) == st.dtm);
}

TEST(ComposeSurface, SingleBuildingRaisesOneCell) {
  FeatureStack st;
  st.dtm = Raster(header(4), 5.0);
  Raster b = empty_layer(st.dtm.header());
  b(1, 2) = 10.0;
  st.layers = {{"buildings", b}};
  Raster s2 = compose_surface(st, 2);
  for (std::size_t k = 0; k < s2.size(); ++k) EXPECT_EQ(s2[k], k == 6 ? 15.0 : 5.0);
}

TEST(ComposeSurface, OverlapsTakePerCellMaxAgainstBruteForce) {
  auto st = small_stack();
  for (int s = 1; s <= 4; ++s) {
    Raster out = compose_surface(st, s);
    for (std::size_t k = 0; k < out.size(); ++k) {
      // Brute-force overlay: collect every applicable increment, take the max.
      std::vector<double> incs;
      for (int l = 0; l + 1 < s; ++l) {
        const auto& layer = st.layers[static_cast<std::size_t>(l)].increments;
        if (layer[k] != layer.nodata()) incs.push_back(layer[k]);
      }
      const double expected = st.dtm[k] + (incs.empty() ? 0.0 : *std::max_element(incs.begin(), incs.end()));
      ASSERT_EQ(out[k], expected) << "s=" << s << " cell " << k;
    }
  }
  EXPECT_EQ(compose_surface(st, 4)(3, 3), st.dtm(3, 3) + 9.0);
}

TEST(ComposeSurface, MonotoneInLevel) {
  auto st = small_stack();
  for (int s = 1; s < 4; ++s) {
    Raster lo = compose_surface(st, s), hi = compose_surface(st, s + 1);
    for (std::size_t k = 0; k < lo.size(); ++k) ASSERT_GE(hi[k], lo[k]);
  }
}

TEST(ComposeSurface, RejectsBadLevelAndHeaderMismatch) {
  auto st = small_stack();
  EXPECT_THROW(compose_surface(st, 0), std::invalid_argument);
  EXPECT_THROW(compose_surface(st, 5), std::invalid_argument);
  st.layers[1].increments = Raster(header(9), 0.0);
  EXPECT_THROW(compose_surface(st, 2), std::invalid_argument);
}

TEST(Noise, DeterministicPerSeedAndDraw) {
  NoiseSpec spec{0.2, 100, 1234};
  auto a = generate_noise(spec, header(50), 7);
  auto b = generate_noise(spec, header(50), 7);
  EXPECT_TRUE(a == b);
  auto c = generate_noise(spec, header(50), 8);
  EXPECT_FALSE(a == c);
  EXPECT_EQ(a[123], noise_at(spec, 7, 123));
  EXPECT_THROW(generate_noise(spec, header(5), 100), std::invalid_argument);
}

TEST(Noise, MillionCellMomentsAndIndependence) {
  NoiseSpec spec{0.2, 100, 42};
  RasterHeader h;
  h.ncols = 1000;
  h.nrows = 1000;
  auto a = generate_noise(spec, h, 3);
  auto b = generate_noise(spec, h, 4);
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    ma += a[k];
    mb += b[k];
  }
  ma /= n;
  mb /= n;
  double va = 0, vb = 0, cab = 0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    va += (a[k] - ma) * (a[k] - ma);
    vb += (b[k] - mb) * (b[k] - mb);
    cab += (a[k] - ma) * (b[k] - mb);
  }
  EXPECT_LE(std::fabs(ma), 4 * 0.2 / std::sqrt(n));
  EXPECT_NEAR(std::sqrt(va / (n - 1)), 0.2, 0.002);
  EXPECT_LT(std::fabs(cab / std::sqrt(va * vb)), 0.01);
}

TEST(BuildDatabase, CountsSmallFactorial) {
  auto dir = temp_dir("count6");
  BuildOptions opt;
  opt.s_levels = {1, 2};
  opt.r_factors = {1};
  auto rep = build_database(small_stack(), NoiseSpec{0.2, 3, 9}, dir, opt);
  EXPECT_EQ(rep.manifest.entries.size(), 6u);
  auto reread = read_manifest(dir / "manifest.jsonl");
  EXPECT_EQ(reread.entries.size(), 6u);
  for (const auto& e : reread.entries) {
    EXPECT_TRUE(fs::exists(reread.resolve(e)));
    EXPECT_EQ(sha256_file(reread.resolve(e)), e.sha256);
  }
}

TEST(BuildDatabase, FullDesignHasTwoThousandMembers) {
  auto dir = temp_dir("full2000");
  BuildOptions opt;
  opt.workers = 2;
  auto rep = build_database(small_stack(10), NoiseSpec{0.2, 100, 1}, dir, opt);
  ASSERT_EQ(rep.manifest.entries.size(), 2000u);
  std::set<DemSpec> seen;
  for (const auto& e : rep.manifest.entries) EXPECT_TRUE(seen.insert(e.spec).second);
  for (int s = 1; s <= 4; ++s)
    for (int e = 0; e < 100; ++e)
      for (int r = 1; r <= 5; ++r) EXPECT_TRUE(seen.count({s, e, r}));
}

TEST(BuildDatabase, VanishingNoiseMakesDrawsIdentical) {
  auto dir = temp_dir("sigma0");
  BuildOptions opt;
  opt.s_levels = {2};
  opt.r_factors = {1, 2};
  auto rep = build_database(small_stack(), NoiseSpec{1e-300, 4, 5}, dir, opt);
  for (int r : {1, 2}) {
    auto first = read_raster(rep.manifest.resolve(*rep.manifest.find({2, 0, r})));
    for (int e = 1; e < 4; ++e) EXPECT_TRUE(read_raster(rep.manifest.resolve(*rep.manifest.find({2, e, r}))) == first);
  }
}

TEST(BuildDatabase, NoiseIsAddedBeforeResampling) {
  auto dir = temp_dir("order");
  auto st = small_stack(12);
  NoiseSpec noise{0.2, 2, 77};
  BuildOptions opt;
  opt.s_levels = {3};
  opt.r_factors = {1, 3};
  auto rep = build_database(st, noise, dir, opt);
  Raster coarse = read_raster(rep.manifest.resolve(*rep.manifest.find({3, 1, 3})));
  Raster fine = compose_surface(st, 3);
  Raster n1 = generate_noise(noise, fine.header(), 1);
  Raster sum = fine;
  for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += n1[k];
  EXPECT_TRUE(coarse == resample_average(sum, 3));
  // Noise drawn on the coarse grid would be a different (and much larger) perturbation.
  Raster wrong = resample_average(fine, 3);
  Raster nc = generate_noise(noise, wrong.header(), 1);
  for (std::size_t k = 0; k < wrong.size(); ++k) wrong[k] += nc[k];
  EXPECT_FALSE(coarse == wrong);
}

TEST(BuildDatabase, ResampleCommutesWithNoise) {
  auto st = small_stack(20);
  NoiseSpec noise{0.2, 5, 3};
  for (int f = 2; f <= 5; ++f) {
    Raster surface = compose_surface(st, 4);
    Raster n = generate_noise(noise, surface.header(), 2);
    Raster sum = surface;
    for (std::size_t k = 0; k < sum.size(); ++k) sum[k] += n[k];
    Raster lhs = resample_average(sum, f);
    Raster a = resample_average(surface, f), b = resample_average(n, f);
    for (std::size_t k = 0; k < lhs.size(); ++k) EXPECT_NEAR(lhs[k], a[k] + b[k], 1e-12);
  }
}

TEST(BuildDatabase, ResumeRebuildsOnlyMissingMembers) {
  auto dir = temp_dir("resume");
  BuildOptions opt;
  opt.s_levels = {1, 2};
  opt.r_factors = {1, 2};
  NoiseSpec noise{0.2, 3, 11};
  auto first = build_database(small_stack(), noise, dir, opt);
  EXPECT_EQ(first.built, 6u);
  const std::string manifest_before = slurp(dir / "manifest.jsonl");
  fs::remove(dir / "dems" / dem_file_name({2, 1, 2}));
  auto second = build_database(small_stack(), noise, dir, opt);
  EXPECT_EQ(second.built, 1u);
  EXPECT_EQ(second.skipped, 5u);
  EXPECT_EQ(slurp(dir / "manifest.jsonl"), manifest_before);
}

TEST(BuildDatabase, ManifestIndependentOfWorkerCount) {
  auto d1 = temp_dir("w1"), d3 = temp_dir("w3");
  BuildOptions opt;
  opt.s_levels = {1, 3};
  opt.r_factors = {1, 2, 5};
  NoiseSpec noise{0.2, 6, 99};
  build_database(small_stack(), noise, d1, opt);
  opt.workers = 3;
  build_database(small_stack(), noise, d3, opt);
  EXPECT_EQ(slurp(d1 / "manifest.jsonl"), slurp(d3 / "manifest.jsonl"));
}

TEST(BuildDatabase, ValidatesNoiseSpec) {
  auto dir = temp_dir("badnoise");
  EXPECT_THROW(build_database(small_stack(), NoiseSpec{0.0, 3, 1}, dir), std::invalid_argument);
  EXPECT_THROW(build_database(small_stack(), NoiseSpec{0.2, 1, 1}, dir), std::invalid_argument);
}
