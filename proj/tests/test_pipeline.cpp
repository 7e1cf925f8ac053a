#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "floodsens/config.hpp"
#include "floodsens/fixture.hpp"

using namespace floodsens;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("floodsens_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json load(const fs::path& p) { return nlohmann::json::parse(slurp(p)); }

bool has_diag(const ConfigResult& r, const std::string& field, const std::string& text) {
  for (const auto& d : r.diagnostics)
    if (d.field == field && d.message.find(text) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST(Fixture, SmallShapeContract) {
  auto fx = demo_fixture(FixtureSize::small);
  EXPECT_EQ(fx.stack.dtm.ncols(), 200u);
  EXPECT_EQ(fx.stack.dtm.nrows(), 200u);
  EXPECT_EQ(fx.stack.dtm.cellsize(), 1.0);
  ASSERT_EQ(fx.stack.layers.size(), 3u);
  for (const auto& l : fx.stack.layers) {
    EXPECT_EQ(l.increments.header(), fx.stack.dtm.header());
    EXPECT_TRUE(l.increments.has_nodata());
  }
  EXPECT_NO_THROW(fx.stack.validate());
  EXPECT_EQ(fx.probes.probes.size(), 20u);
  EXPECT_NO_THROW(fx.probes.validate_inside(fx.stack.dtm.header()));
  for (const auto& p : fx.probes.probes) {
    const auto c = locate(fx.stack.dtm.header(), p.x, p.y);
    EXPECT_TRUE(fx.stack.layers[0].increments.is_nodata(c.row * 200 + c.col)) << p.id << " inside a building";
  }
  auto medium = demo_fixture(FixtureSize::medium);
  EXPECT_EQ(medium.stack.dtm.ncols(), 500u);
}

TEST(Fixture, RegenerationIsBitIdentical) {
  auto a = temp_dir("fx_a"), b = temp_dir("fx_b");
  auto fa = write_fixture(demo_fixture(FixtureSize::small, 9), a);
  write_fixture(demo_fixture(FixtureSize::small, 9), b);
  for (const auto& entry : fs::directory_iterator(a))
    EXPECT_EQ(slurp(entry.path()), slurp(b / entry.path().filename())) << entry.path().filename();
  auto other = demo_fixture(FixtureSize::small, 10);
  EXPECT_FALSE(other.stack.layers[0].increments == read_raster(a / "buildings.asc"));
}

TEST(Fixture, BaseFlowStaysInChannel) {
  auto fx = demo_fixture(FixtureSize::small);
  swe::SolverConfig cfg;
  cfg.manning_n = fx.manning_n;
  cfg.t_end = 0.0;
  cfg.steady_max_time = 900.0;
  auto res = swe::run_simulation(fx.stack.dtm, cfg, fx.boundaries, swe::Hydrograph::constant(fx.base_q),
                                 swe::InitialCondition::steady_from_constant_q);
  const auto& h = fx.stack.dtm.header();
  double outside = 0.0, inside = 0.0;
  for (std::size_t i = 0; i < h.nrows; ++i)
    for (std::size_t j = 0; j < h.ncols; ++j) {
      const double d = std::fabs(h.y_center(i) - fx.channel_y);
      (d > fx.channel_half_width ? outside : inside) = std::max(d > fx.channel_half_width ? outside : inside, res.max_depth(i, j));
    }
  EXPECT_EQ(outside, 0.0);
  EXPECT_GT(inside, 0.1);
  for (std::size_t j : {20u, 100u, 180u}) {
    double q = 0.0;
    for (std::size_t i = 0; i < h.nrows; ++i) q += res.final_state.hu[i * h.ncols + j] * h.cellsize;
    EXPECT_NEAR(q, fx.base_q, 0.01 * fx.base_q) << "section " << j;
  }
}

TEST(Config, DemoConfigValidates) {
  auto dir = temp_dir("cfg_ok");
  auto files = write_fixture(demo_fixture(FixtureSize::small), dir);
  auto res = validate_config(files.config);
  ASSERT_TRUE(res.ok()) << format_diagnostics(res.diagnostics);
  const auto& c = *res.config;
  EXPECT_EQ(c.dtm, dir / "dtm.asc");
  EXPECT_EQ(c.layers.size(), 3u);
  EXPECT_EQ(c.design_size(), 200u);
  EXPECT_EQ(c.sampling.budget, 200u);
  EXPECT_EQ(c.boundaries.west.kind, swe::EdgeKind::inflow_discharge);
  EXPECT_EQ(c.store, dir / "store");
  // The resolved form validates to the same config.
  auto again = validate_config_json(to_json(c), dir);
  ASSERT_TRUE(again.ok()) << format_diagnostics(again.diagnostics);
  EXPECT_EQ(to_json(*again.config).dump(), to_json(c).dump());
}

TEST(Config, ReportsEveryViolation) {
  auto dir = temp_dir("cfg_bad");
  auto files = write_fixture(demo_fixture(FixtureSize::small), dir);
  auto j = load(files.config);
  j["noise"]["n_draws"] = 100;
  j["sampling"]["budget"] = 3000;
  j["probes"] = "missing.csv";
  j["solver"]["cfl"] = 2.0;
  j["analysis"]["bogus"] = 1;
  auto res = validate_config_json(j, dir);
  EXPECT_FALSE(res.ok()) << format_diagnostics(res.diagnostics);
  EXPECT_TRUE(has_diag(res, "sampling.budget", "budget exceeds design size")) << format_diagnostics(res.diagnostics);
  EXPECT_TRUE(has_diag(res, "probes", "file not found"));
  EXPECT_TRUE(has_diag(res, "solver", "cfl"));
  EXPECT_TRUE(has_diag(res, "analysis.bogus", "unknown field"));
  EXPECT_GE(res.diagnostics.size(), 4u) << format_diagnostics(res.diagnostics);
}

TEST(Config, TypeErrorsAndFloorFeasibility) {
  auto dir = temp_dir("cfg_types");
  auto files = write_fixture(demo_fixture(FixtureSize::small), dir);
  auto j = load(files.config);
  j["noise"]["sigma"] = "0.2";
  j["sampling"]["min_e_per_sr"] = 11;
  j["boundaries"]["east"]["type"] = "weir";
  j["s_levels"] = {1, 5};
  auto res = validate_config_json(j, dir);
  EXPECT_TRUE(has_diag(res, "noise.sigma", "expected a number"));
  EXPECT_TRUE(has_diag(res, "sampling.min_e_per_sr", "exceeds noise.n_draws"));
  EXPECT_TRUE(has_diag(res, "boundaries.east.type", "unknown boundary type"));
  EXPECT_TRUE(has_diag(res, "s_levels", "outside 1..4"));
}

TEST(Config, UnreadableFileThrows) {
  EXPECT_THROW(validate_config("/nonexistent/config.json"), std::runtime_error);
  auto dir = temp_dir("cfg_json");
  std::ofstream(dir / "c.json") << "{ not json";
  EXPECT_THROW(validate_config(dir / "c.json"), std::runtime_error);
}
