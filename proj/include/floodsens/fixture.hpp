#pragma once

// Procedural urban valley used as a stand-in dataset: a west-to-east sloping valley
// with a trapezoidal channel, building blocks on both floodplains, a partial levee and
// garden walls, and street curbs.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "floodsens/campaign.hpp"
#include "floodsens/dem_ensemble.hpp"
#include "floodsens/raster.hpp"
#include "floodsens/rng.hpp"
#include "floodsens/swe.hpp"

namespace floodsens {

enum class FixtureSize { small, medium };

inline FixtureSize parse_fixture_size(const std::string& s) {
  if (s == "small") return FixtureSize::small;
  if (s == "medium") return FixtureSize::medium;
  throw std::invalid_argument("unknown fixture size '" + s + "' (expected small|medium)");
}

struct DemoFixture {
  FeatureStack stack;
  swe::Hydrograph hydrograph;
  swe::BoundarySpec boundaries;
  ProbeSet probes;
  double base_q = 0.0;
  double peak_q = 0.0;
  double manning_n = 0.015;
  double channel_y = 0.0;  // northing of the channel axis
  double channel_half_width = 10.0;
};

struct FixtureGeometry {
  double valley_slope = 0.002;
  double channel_depth = 2.0;
  double channel_half_width = 10.0;
  double channel_bottom_half_width = 8.0;
  double floodplain_slope = 0.008;
  double building_height_min = 6.0;
  double building_height_max = 10.0;
  double wall_height = 1.2;
  double levee_height = 0.6;
  double curb_height = 0.15;
};

inline DemoFixture demo_fixture(FixtureSize size, std::uint64_t seed = 2024, const FixtureGeometry& g = {}) {
  const std::size_t n = size == FixtureSize::small ? 200 : 500;
  RasterHeader h;
  h.ncols = h.nrows = n;
  h.cellsize = 1.0;
  h.xll = 1000.0;
  h.yll = 2000.0;
  const double L = static_cast<double>(n);
  const double yc = h.yll + L / 2.0;

  DemoFixture fx;
  fx.channel_y = yc;
  fx.channel_half_width = g.channel_half_width;
  Raster dtm(h);
  Raster buildings(h, h.nodata), walls(h, h.nodata), curbs(h, h.nodata);

  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const double x = h.x_center(j) - h.xll, y = h.y_center(i);
      const double d = std::fabs(y - yc);
      double z = 10.0 - g.valley_slope * x;
      if (d <= g.channel_bottom_half_width)
        z -= g.channel_depth;
      else if (d < g.channel_half_width)
        z -= g.channel_depth * (g.channel_half_width - d) / (g.channel_half_width - g.channel_bottom_half_width);
      else
        z += g.floodplain_slope * (d - g.channel_half_width) + 0.05 * std::sin(x / 17.0) * std::cos(y / 23.0);
      dtm(i, j) = z;
    }

  // Building blocks: rows of lots parallel to the channel on both banks, separated by
  // streets; each lot holds one building of random footprint and height.
  SplitMix64 rng(seed);
  const double setback = 6.0, lot = 16.0, street = 8.0;
  // Raises cells whose centres lie in [x0, x1) x [y0, y1) (x relative to the west edge).
  auto fill = [&](Raster& r, double x0, double x1, double y0, double y1, double v) {
    const auto clampi = [&](double c) { return static_cast<std::size_t>(std::clamp(c, 0.0, L)); };
    const std::size_t j0 = clampi(std::ceil(x0 - 0.5)), j1 = clampi(std::ceil(x1 - 0.5));
    const double ytop = h.ytop();
    const std::size_t i0 = clampi(std::floor(ytop - y1 - 0.5) + 1.0), i1 = clampi(std::floor(ytop - y0 - 0.5) + 1.0);
    for (std::size_t i = i0; i < i1; ++i)
      for (std::size_t j = j0; j < j1; ++j) {
        const double y = h.y_center(i);
        if (y < y0 || y >= y1) continue;
        r(i, j) = r.is_nodata(i * n + j) ? v : std::max(r(i, j), v);
      }
  };
  for (int bank : {-1, 1}) {
    for (double d0 = g.channel_half_width + setback; d0 + lot <= L / 2.0 - 4.0; d0 += lot + street) {
      for (double x0 = 20.0; x0 + lot <= L - 12.0; x0 += lot + street) {
        if (rng.uniform() < 0.2) continue;  // vacant lot
        const double bw = 8.0 + std::floor(rng.uniform() * 6.0);
        const double bd = 8.0 + std::floor(rng.uniform() * 6.0);
        const double ox = std::floor(rng.uniform() * (lot - bw + 1.0));
        const double od = std::floor(rng.uniform() * (lot - bd + 1.0));
        const double hb = g.building_height_min + (g.building_height_max - g.building_height_min) * rng.uniform();
        const double dy0 = d0 + od, dy1 = dy0 + bd;
        const double y0 = bank > 0 ? yc + dy0 : yc - dy1, y1 = bank > 0 ? yc + dy1 : yc - dy0;
        fill(buildings, x0 + ox, x0 + ox + bw, y0, y1, std::round(hb * 100.0) / 100.0);
        // Garden wall along the lot's downstream side.
        if (rng.uniform() < 0.5) {
          const double wy0 = bank > 0 ? yc + d0 : yc - d0 - lot, wy1 = bank > 0 ? yc + d0 + lot : yc - d0;
          fill(walls, x0 + lot - 1.0, x0 + lot, wy0, wy1, g.wall_height);
        }
      }
      // Curbs along both sides of the street beyond this row of lots.
      const double s0 = d0 + lot, s1 = s0 + street;
      for (double c : {s0, s1 - 1.0}) {
        const double cy0 = bank > 0 ? yc + c : yc - c - 1.0;
        fill(curbs, 0.0, L, cy0, cy0 + 1.0, g.curb_height);
      }
    }
  }
  // Partial levee on the north bank.
  fill(walls, 0.3 * L, 0.65 * L, yc + g.channel_half_width + 1.0, yc + g.channel_half_width + 2.0, g.levee_height);

  fx.stack.dtm = dtm;
  fx.stack.layers = {{"buildings", buildings}, {"walls", walls}, {"thin_structures", curbs}};

  fx.base_q = 20.0;
  fx.peak_q = size == FixtureSize::small ? 150.0 : 300.0;
  fx.hydrograph = swe::Hydrograph({{0.0, fx.base_q}, {60.0, fx.peak_q}});
  fx.boundaries.west = {swe::EdgeKind::inflow_discharge, yc - g.channel_half_width, yc + g.channel_half_width};
  fx.boundaries.east = {swe::EdgeKind::neumann_outflow};

  // Probes: street and garden points on both floodplains plus two in the channel.
  auto free_cell = [&](double x, double y) {
    const auto c = locate(h, x, y);
    const std::size_t k = c.row * n + c.col;
    return buildings.is_nodata(k) && walls.is_nodata(k);
  };
  int id = 1;
  auto add_probe = [&](double x, double y, const std::string& label) {
    // Walk downstream until the point falls outside all obstacles.
    while (!free_cell(h.xll + x, y) && x < L - 1.0) x += 1.0;
    fx.probes.probes.push_back({"P" + std::to_string(id++), h.xll + x, y, label});
  };
  add_probe(0.3 * L + 0.5, yc + 0.5, "channel");
  add_probe(0.7 * L + 0.5, yc - 0.5, "channel");
  const double offsets[] = {g.channel_half_width + 3.5, g.channel_half_width + setback + lot + street / 2.0 + 0.5,
                            g.channel_half_width + 2.0 * (lot + street) + 1.5};
  const double xs[] = {0.22 * L, 0.45 * L, 0.68 * L};
  for (int bank : {1, -1})
    for (double off : offsets)
      for (double x : xs) {
        if (fx.probes.probes.size() >= 20) break;
        const std::string label = off < g.channel_half_width + setback ? "bank" : "street";
        add_probe(std::floor(x) + 0.5, yc + bank * off, label);
      }
  return fx;
}

struct FixtureFiles {
  std::filesystem::path dtm, hydrograph, probes, config;
  std::vector<std::pair<std::string, std::filesystem::path>> layers;
};

inline FixtureFiles write_fixture(const DemoFixture& fx, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  FixtureFiles f;
  f.dtm = dir / "dtm.asc";
  write_raster(fx.stack.dtm, f.dtm);
  for (const auto& l : fx.stack.layers) {
    auto p = dir / (l.class_name + ".asc");
    write_raster(l.increments, p);
    f.layers.emplace_back(l.class_name, p);
  }
  f.hydrograph = dir / "hydrograph.csv";
  swe::write_hydrograph_csv(fx.hydrograph, f.hydrograph.string());
  f.probes = dir / "probes.csv";
  write_probes_csv(fx.probes, f.probes);

  // Desk-scale pipeline config: 4 S x 10 E x 5 R, full factorial.
  nlohmann::ordered_json c;
  c["stack"]["dtm"] = "dtm.asc";
  c["stack"]["layers"] = nlohmann::ordered_json::array();
  for (const auto& [name, path] : f.layers) c["stack"]["layers"].push_back({{"name", name}, {"path", path.filename().string()}});
  c["noise"] = {{"sigma", 0.2}, {"n_draws", 10}, {"seed", 7}};
  c["s_levels"] = {1, 2, 3, 4};
  c["r_factors"] = {1, 2, 3, 4, 5};
  c["database"] = "dems";
  c["solver"] = {{"manning_n", fx.manning_n}, {"cfl", 0.45}, {"h_dry", 1e-6}, {"reconstruction", "first_order"},
                 {"t_end", 300.0}, {"initial", "dry"}};
  auto seg = [](const swe::EdgeCondition& e) { return nlohmann::ordered_json::array({e.segment_lo, e.segment_hi}); };
  c["boundaries"] = {{"north", {{"type", "wall"}}},
                     {"south", {{"type", "wall"}}},
                     {"west", {{"type", "inflow"}, {"segment", seg(fx.boundaries.west)}}},
                     {"east", {{"type", "outflow"}}}};
  c["hydrograph"] = "hydrograph.csv";
  c["sampling"] = {{"strategy", "stratified"}, {"min_e_per_sr", 10}, {"budget", 200}, {"seed", 11}};
  c["store"] = "store";
  c["probes"] = "probes.csv";
  c["convergence"] = {{"order_seed", 5}, {"tol", 0.01}};
  c["analysis"] = {{"cellsize", 5.0}, {"method", "average"}, {"exclude_dry", true}, {"exclude_buildings", false},
                   {"min_samples", 100}, {"boot", 2000}, {"boot_n", 150}, {"seed", 13}, {"out", "analysis"}};
  c["workers"] = 1;
  f.config = dir / "config.json";
  std::ofstream out(f.config, std::ios::trunc);
  out << c.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write '" + f.config.string() + "'");
  return f;
}

}  // namespace floodsens
