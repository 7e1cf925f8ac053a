#pragma once

// Pipeline configuration: one JSON file drives every stage. Relative paths resolve
// against the directory of the config file.

#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "floodsens/campaign.hpp"
#include "floodsens/dem_ensemble.hpp"
#include "floodsens/gsa.hpp"
#include "floodsens/swe.hpp"

#ifndef FLOODSENS_VERSION
#define FLOODSENS_VERSION "0.0.0"
#endif

namespace floodsens {

inline constexpr const char* kToolVersion = FLOODSENS_VERSION;

struct LayerPath {
  std::string name;
  std::filesystem::path path;
};

struct AnalysisConfig {
  double cellsize = 5.0;
  ResampleMethod method = ResampleMethod::average;
  double wet_depth = kDefaultWetDepth;
  bool exclude_dry = true;
  bool exclude_buildings = false;
  std::size_t min_samples = 100;
  LevelPolicy policy = LevelPolicy::strict;
  bool bias_correction = false;
  std::size_t boot = 10000;
  std::size_t boot_n = 1000;
  double level = 0.95;
  std::uint64_t seed = 13;
  double hist_bin = 0.05;
  std::filesystem::path out;
};

struct ConvergenceConfig {
  std::uint64_t order_seed = 5;
  std::optional<std::size_t> window;  // default: 10% of the sample count
  double tol = 0.01;
};

struct PipelineConfig {
  std::filesystem::path source;  // config file
  std::filesystem::path dtm;
  std::vector<LayerPath> layers;
  NoiseSpec noise;
  std::vector<int> s_levels = {1, 2, 3, 4};
  std::vector<int> r_factors = {1, 2, 3, 4, 5};
  std::filesystem::path database;
  swe::SolverConfig solver;
  swe::InitialCondition initial = swe::InitialCondition::dry;
  swe::BoundarySpec boundaries;
  std::filesystem::path hydrograph;
  SamplingPlan sampling;
  std::filesystem::path store;
  std::filesystem::path probes;
  ConvergenceConfig convergence;
  AnalysisConfig analysis;
  unsigned workers = 1;

  std::size_t design_size() const {
    std::set<int> s(s_levels.begin(), s_levels.end()), r(r_factors.begin(), r_factors.end());
    return s.size() * r.size() * static_cast<std::size_t>(std::max(0, noise.n_draws));
  }
  std::filesystem::path manifest_path() const { return database / "manifest.jsonl"; }
};

struct Diagnostic {
  std::string field;
  std::string message;
};

struct ConfigResult {
  std::optional<PipelineConfig> config;
  std::vector<Diagnostic> diagnostics;

  bool ok() const noexcept { return config.has_value() && diagnostics.empty(); }
};

inline std::string format_diagnostics(const std::vector<Diagnostic>& d) {
  std::ostringstream out;
  for (const auto& x : d) out << x.field << ": " << x.message << '\n';
  return out.str();
}

namespace detail {

class ConfigReader {
 public:
  ConfigReader(std::filesystem::path base, std::vector<Diagnostic>& diags) : base_(std::move(base)), diags_(diags) {}

  void error(const std::string& field, const std::string& msg) { diags_.push_back({field, msg}); }

  const nlohmann::json* section(const nlohmann::json& j, const std::string& key, const std::string& path,
                                std::set<std::string> allowed) {
    if (!j.contains(key)) return nullptr;
    const auto& s = j.at(key);
    if (!s.is_object()) {
      error(path, "must be an object");
      return nullptr;
    }
    unknown_keys(s, path, allowed);
    return &s;
  }

  void unknown_keys(const nlohmann::json& j, const std::string& path, const std::set<std::string>& allowed) {
    for (auto it = j.begin(); it != j.end(); ++it)
      if (!allowed.count(it.key())) error(path.empty() ? it.key() : path + "." + it.key(), "unknown field");
  }

  template <typename T>
  void get(const nlohmann::json* j, const std::string& key, const std::string& path, T& out) {
    if (!j || !j->contains(key)) return;
    const auto& v = j->at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::invalid_argument("expected a boolean");
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<long long>() < 0)) throw std::invalid_argument("expected a non-negative integer");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw std::invalid_argument("expected an integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw std::invalid_argument("expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::invalid_argument("expected a string");
      }
      out = v.get<T>();
    } catch (const std::exception& e) {
      error(path, e.what());
    }
  }

  void get_path(const nlohmann::json* j, const std::string& key, const std::string& path, std::filesystem::path& out,
                bool must_exist, bool required) {
    if (!j || !j->contains(key)) {
      if (required) error(path, "missing required field");
      return;
    }
    std::string s;
    get(j, key, path, s);
    if (s.empty()) {
      error(path, "empty path");
      return;
    }
    out = resolve(s);
    if (must_exist && !std::filesystem::exists(out)) error(path, "file not found: " + out.string());
  }

  std::filesystem::path resolve(const std::string& s) const {
    std::filesystem::path p(s);
    return (p.is_absolute() ? p : base_ / p).lexically_normal();
  }

  template <typename Fn>
  void get_enum(const nlohmann::json* j, const std::string& key, const std::string& path, Fn&& parse) {
    std::string s;
    if (!j || !j->contains(key)) return;
    get(j, key, path, s);
    try {
      parse(s);
    } catch (const std::exception& e) {
      error(path, e.what());
    }
  }

  void get_int_list(const nlohmann::json& j, const std::string& key, std::vector<int>& out) {
    if (!j.contains(key)) return;
    const auto& v = j.at(key);
    if (!v.is_array() || v.empty()) {
      error(key, "expected a non-empty array of integers");
      return;
    }
    out.clear();
    for (const auto& x : v) {
      if (!x.is_number_integer()) {
        error(key, "expected integers");
        return;
      }
      out.push_back(x.get<int>());
    }
  }

 private:
  std::filesystem::path base_;
  std::vector<Diagnostic>& diags_;
};

}  // namespace detail

/// Parses and validates a config document. Every violation is reported with its field
/// path; the config is returned only when there are none.
inline ConfigResult validate_config_json(const nlohmann::json& j, const std::filesystem::path& base_dir,
                                         const std::filesystem::path& source = {}) {
  ConfigResult res;
  auto& diags = res.diagnostics;
  detail::ConfigReader rd(base_dir, diags);
  if (!j.is_object()) {
    diags.push_back({"", "config must be a JSON object"});
    return res;
  }
  rd.unknown_keys(j, "", {"stack", "noise", "s_levels", "r_factors", "database", "solver", "boundaries", "hydrograph",
                          "sampling", "store", "probes", "convergence", "analysis", "workers"});
  PipelineConfig c;
  c.source = source;

  // stack
  if (const auto* st = rd.section(j, "stack", "stack", {"dtm", "layers"})) {
    rd.get_path(st, "dtm", "stack.dtm", c.dtm, true, true);
    if (st->contains("layers")) {
      const auto& ls = st->at("layers");
      if (!ls.is_array()) rd.error("stack.layers", "expected an array");
      else
        for (std::size_t i = 0; i < ls.size(); ++i) {
          const std::string p = "stack.layers[" + std::to_string(i) + "]";
          if (!ls[i].is_object()) {
            rd.error(p, "expected an object with name and path");
            continue;
          }
          rd.unknown_keys(ls[i], p, {"name", "path"});
          LayerPath lp;
          rd.get(&ls[i], "name", p + ".name", lp.name);
          if (lp.name.empty()) rd.error(p + ".name", "missing layer name");
          rd.get_path(&ls[i], "path", p + ".path", lp.path, true, true);
          c.layers.push_back(lp);
        }
    }
  } else {
    rd.error("stack", "missing required section");
  }

  // noise
  if (const auto* nz = rd.section(j, "noise", "noise", {"sigma", "n_draws", "seed"})) {
    rd.get(nz, "sigma", "noise.sigma", c.noise.sigma);
    rd.get(nz, "n_draws", "noise.n_draws", c.noise.n_draws);
    rd.get(nz, "seed", "noise.seed", c.noise.master_seed);
  }
  if (!(c.noise.sigma > 0.0)) rd.error("noise.sigma", "must be > 0");
  if (c.noise.n_draws < 2) rd.error("noise.n_draws", "must be >= 2");

  rd.get_int_list(j, "s_levels", c.s_levels);
  rd.get_int_list(j, "r_factors", c.r_factors);
  const int max_level = static_cast<int>(c.layers.size()) + 1;
  for (int s : c.s_levels)
    if (s < 1 || s > max_level)
      rd.error("s_levels", "level " + std::to_string(s) + " outside 1.." + std::to_string(max_level));
  for (int r : c.r_factors)
    if (r < 1) rd.error("r_factors", "factor " + std::to_string(r) + " must be >= 1");
  if (std::set<int>(c.s_levels.begin(), c.s_levels.end()).size() != c.s_levels.size())
    rd.error("s_levels", "duplicate levels");
  if (std::set<int>(c.r_factors.begin(), c.r_factors.end()).size() != c.r_factors.size())
    rd.error("r_factors", "duplicate factors");

  rd.get_path(&j, "database", "database", c.database, false, false);
  if (c.database.empty()) c.database = rd.resolve("dems");
  rd.get_path(&j, "store", "store", c.store, false, false);
  if (c.store.empty()) c.store = rd.resolve("store");

  // solver
  if (const auto* sv = rd.section(j, "solver", "solver",
                                  {"manning_n", "cfl", "h_dry", "reconstruction", "t_end", "output_interval",
                                   "initial", "steady_window", "steady_tol", "steady_max_time"})) {
    rd.get(sv, "manning_n", "solver.manning_n", c.solver.manning_n);
    rd.get(sv, "cfl", "solver.cfl", c.solver.cfl);
    rd.get(sv, "h_dry", "solver.h_dry", c.solver.h_dry);
    rd.get_enum(sv, "reconstruction", "solver.reconstruction",
                [&](const std::string& s) { c.solver.reconstruction = swe::parse_reconstruction(s); });
    rd.get(sv, "t_end", "solver.t_end", c.solver.t_end);
    rd.get(sv, "output_interval", "solver.output_interval", c.solver.output_interval);
    rd.get_enum(sv, "initial", "solver.initial",
                [&](const std::string& s) { c.initial = swe::parse_initial_condition(s); });
    rd.get(sv, "steady_window", "solver.steady_window", c.solver.steady_window);
    rd.get(sv, "steady_tol", "solver.steady_tol", c.solver.steady_tol);
    rd.get(sv, "steady_max_time", "solver.steady_max_time", c.solver.steady_max_time);
  }
  try {
    c.solver.validate();
  } catch (const std::exception& e) {
    rd.error("solver", e.what());
  }

  // boundaries
  if (const auto* bc = rd.section(j, "boundaries", "boundaries", {"north", "south", "west", "east"})) {
    auto edge = [&](const char* name, swe::EdgeCondition& out) {
      const std::string p = std::string("boundaries.") + name;
      const auto* e = rd.section(*bc, name, p, {"type", "segment"});
      if (!e) return;
      rd.get_enum(e, "type", p + ".type", [&](const std::string& s) { out.kind = swe::parse_edge_kind(s); });
      if (e->contains("segment")) {
        const auto& seg = e->at("segment");
        if (!seg.is_array() || seg.size() != 2 || !seg[0].is_number() || !seg[1].is_number() ||
            !(seg[0].get<double>() < seg[1].get<double>()))
          rd.error(p + ".segment", "expected [lo, hi] with lo < hi");
        else {
          out.segment_lo = seg[0].get<double>();
          out.segment_hi = seg[1].get<double>();
        }
        if (out.kind != swe::EdgeKind::inflow_discharge) rd.error(p + ".segment", "only inflow edges take a segment");
      }
    };
    edge("north", c.boundaries.north);
    edge("south", c.boundaries.south);
    edge("west", c.boundaries.west);
    edge("east", c.boundaries.east);
  }
  const bool has_inflow = c.boundaries.north.kind == swe::EdgeKind::inflow_discharge ||
                          c.boundaries.south.kind == swe::EdgeKind::inflow_discharge ||
                          c.boundaries.west.kind == swe::EdgeKind::inflow_discharge ||
                          c.boundaries.east.kind == swe::EdgeKind::inflow_discharge;
  rd.get_path(&j, "hydrograph", "hydrograph", c.hydrograph, true, has_inflow);
  if (!c.hydrograph.empty() && std::filesystem::exists(c.hydrograph)) {
    try {
      swe::read_hydrograph_csv(c.hydrograph.string());
    } catch (const std::exception& e) {
      rd.error("hydrograph", e.what());
    }
  }

  // sampling
  if (const auto* sp = rd.section(j, "sampling", "sampling", {"strategy", "min_e_per_sr", "budget", "seed"})) {
    rd.get_enum(sp, "strategy", "sampling.strategy",
                [&](const std::string& s) { c.sampling.strategy = parse_plan_strategy(s); });
    rd.get(sp, "min_e_per_sr", "sampling.min_e_per_sr", c.sampling.min_e_per_sr);
    rd.get(sp, "budget", "sampling.budget", c.sampling.budget);
    rd.get(sp, "seed", "sampling.seed", c.sampling.seed);
    if (!sp->contains("budget")) c.sampling.budget = c.design_size();
  } else {
    c.sampling.budget = c.design_size();
  }
  const std::size_t design = c.design_size();
  if (c.sampling.budget > design)
    rd.error("sampling.budget", "budget exceeds design size (" + std::to_string(c.sampling.budget) + " > " +
                                    std::to_string(design) + ")");
  if (c.sampling.budget == 0) rd.error("sampling.budget", "must be >= 1");
  if (c.sampling.strategy == PlanStrategy::stratified) {
    const std::size_t cells = std::set<int>(c.s_levels.begin(), c.s_levels.end()).size() *
                              std::set<int>(c.r_factors.begin(), c.r_factors.end()).size();
    if (c.sampling.min_e_per_sr > static_cast<std::size_t>(std::max(0, c.noise.n_draws)))
      rd.error("sampling.min_e_per_sr", "exceeds noise.n_draws");
    else if (c.sampling.min_e_per_sr * cells > c.sampling.budget)
      rd.error("sampling.min_e_per_sr", "infeasible floor: min_e_per_sr x |S| x |R| > budget");
  }

  rd.get_path(&j, "probes", "probes", c.probes, true, true);
  if (!c.probes.empty() && std::filesystem::exists(c.probes)) {
    try {
      read_probes_csv(c.probes);
    } catch (const std::exception& e) {
      rd.error("probes", e.what());
    }
  }

  if (const auto* cv = rd.section(j, "convergence", "convergence", {"order_seed", "window", "tol"})) {
    rd.get(cv, "order_seed", "convergence.order_seed", c.convergence.order_seed);
    if (cv->contains("window") && !cv->at("window").is_null()) {
      std::size_t w = 0;
      rd.get(cv, "window", "convergence.window", w);
      if (w == 0) rd.error("convergence.window", "must be >= 1");
      c.convergence.window = w;
    }
    rd.get(cv, "tol", "convergence.tol", c.convergence.tol);
    if (!(c.convergence.tol > 0.0)) rd.error("convergence.tol", "must be > 0");
  }

  // analysis
  auto& a = c.analysis;
  const auto* an = rd.section(j, "analysis", "analysis",
                              {"cellsize", "method", "wet_depth", "exclude_dry", "exclude_buildings", "min_samples",
                               "policy", "bias_correction", "boot", "boot_n", "level", "seed", "hist_bin", "out"});
  rd.get(an, "cellsize", "analysis.cellsize", a.cellsize);
  rd.get_enum(an, "method", "analysis.method", [&](const std::string& s) { a.method = parse_resample_method(s); });
  rd.get(an, "wet_depth", "analysis.wet_depth", a.wet_depth);
  rd.get(an, "exclude_dry", "analysis.exclude_dry", a.exclude_dry);
  rd.get(an, "exclude_buildings", "analysis.exclude_buildings", a.exclude_buildings);
  rd.get(an, "min_samples", "analysis.min_samples", a.min_samples);
  rd.get_enum(an, "policy", "analysis.policy", [&](const std::string& s) {
    if (s == "strict") a.policy = LevelPolicy::strict;
    else if (s == "pool") a.policy = LevelPolicy::pool;
    else throw std::invalid_argument("unknown level policy '" + s + "' (expected strict|pool)");
  });
  rd.get(an, "bias_correction", "analysis.bias_correction", a.bias_correction);
  rd.get(an, "boot", "analysis.boot", a.boot);
  rd.get(an, "boot_n", "analysis.boot_n", a.boot_n);
  rd.get(an, "level", "analysis.level", a.level);
  rd.get(an, "seed", "analysis.seed", a.seed);
  rd.get(an, "hist_bin", "analysis.hist_bin", a.hist_bin);
  rd.get_path(an, "out", "analysis.out", a.out, false, false);
  if (a.out.empty()) a.out = rd.resolve("analysis");
  if (!(a.cellsize > 0.0)) rd.error("analysis.cellsize", "must be > 0");
  if (!(a.wet_depth >= 0.0)) rd.error("analysis.wet_depth", "must be >= 0");
  if (!(a.level > 0.0 && a.level < 1.0)) rd.error("analysis.level", "must be in (0, 1)");
  if (!(a.hist_bin > 0.0)) rd.error("analysis.hist_bin", "must be > 0");
  if (a.boot_n > c.sampling.budget) rd.error("analysis.boot_n", "exceeds sampling.budget");
  if (a.min_samples > c.sampling.budget) rd.error("analysis.min_samples", "exceeds sampling.budget");

  rd.get(&j, "workers", "workers", c.workers);
  if (c.workers == 0) rd.error("workers", "must be >= 1");

  if (diags.empty()) res.config = std::move(c);
  return res;
}

/// Reads and validates a config file. Unreadable or unparseable files throw.
inline ConfigResult validate_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  const auto abs = std::filesystem::absolute(path);
  return validate_config_json(j, abs.parent_path(), abs);
}

inline nlohmann::ordered_json edge_to_json(const swe::EdgeCondition& e) {
  nlohmann::ordered_json j;
  switch (e.kind) {
    case swe::EdgeKind::wall: j["type"] = "wall"; break;
    case swe::EdgeKind::neumann_outflow: j["type"] = "outflow"; break;
    case swe::EdgeKind::inflow_discharge: j["type"] = "inflow"; break;
  }
  if (std::isfinite(e.segment_lo) && std::isfinite(e.segment_hi)) j["segment"] = {e.segment_lo, e.segment_hi};
  return j;
}

/// Fully resolved config (absolute paths, defaults filled in).
inline nlohmann::ordered_json to_json(const PipelineConfig& c) {
  nlohmann::ordered_json j;
  j["stack"]["dtm"] = c.dtm.string();
  j["stack"]["layers"] = nlohmann::ordered_json::array();
  for (const auto& l : c.layers) j["stack"]["layers"].push_back({{"name", l.name}, {"path", l.path.string()}});
  j["noise"] = {{"sigma", c.noise.sigma}, {"n_draws", c.noise.n_draws}, {"seed", c.noise.master_seed}};
  j["s_levels"] = c.s_levels;
  j["r_factors"] = c.r_factors;
  j["database"] = c.database.string();
  const auto& s = c.solver;
  j["solver"] = {{"manning_n", s.manning_n},
                 {"cfl", s.cfl},
                 {"h_dry", s.h_dry},
                 {"reconstruction", swe::to_string(s.reconstruction)},
                 {"t_end", s.t_end},
                 {"output_interval", s.output_interval},
                 {"initial", c.initial == swe::InitialCondition::dry ? "dry" : "steady"},
                 {"steady_window", s.steady_window},
                 {"steady_tol", s.steady_tol},
                 {"steady_max_time", s.steady_max_time}};
  j["boundaries"] = {{"north", edge_to_json(c.boundaries.north)},
                     {"south", edge_to_json(c.boundaries.south)},
                     {"west", edge_to_json(c.boundaries.west)},
                     {"east", edge_to_json(c.boundaries.east)}};
  j["hydrograph"] = c.hydrograph.string();
  j["sampling"] = {{"strategy", to_string(c.sampling.strategy)},
                   {"min_e_per_sr", c.sampling.min_e_per_sr},
                   {"budget", c.sampling.budget},
                   {"seed", c.sampling.seed}};
  j["store"] = c.store.string();
  j["probes"] = c.probes.string();
  j["convergence"] = {{"order_seed", c.convergence.order_seed},
                      {"window", c.convergence.window ? nlohmann::ordered_json(*c.convergence.window) : nullptr},
                      {"tol", c.convergence.tol}};
  const auto& a = c.analysis;
  j["analysis"] = {{"cellsize", a.cellsize},
                   {"method", to_string(a.method)},
                   {"wet_depth", a.wet_depth},
                   {"exclude_dry", a.exclude_dry},
                   {"exclude_buildings", a.exclude_buildings},
                   {"min_samples", a.min_samples},
                   {"policy", a.policy == LevelPolicy::strict ? "strict" : "pool"},
                   {"bias_correction", a.bias_correction},
                   {"boot", a.boot},
                   {"boot_n", a.boot_n},
                   {"level", a.level},
                   {"seed", a.seed},
                   {"hist_bin", a.hist_bin},
                   {"out", a.out.string()}};
  j["workers"] = c.workers;
  return j;
}

/// Writes resolved_config.json (config plus tool version) into an output directory.
inline void write_provenance(const PipelineConfig& c, const std::filesystem::path& dir,
                             const nlohmann::ordered_json& extra = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["tool"] = "floodsens";
  j["version"] = kToolVersion;
  j["config_file"] = c.source.string();
  j["config"] = to_json(c);
  if (!extra.is_null()) j["run"] = extra;
  std::ofstream out(dir / "resolved_config.json", std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write provenance into '" + dir.string() + "'");
}

}  // namespace floodsens
