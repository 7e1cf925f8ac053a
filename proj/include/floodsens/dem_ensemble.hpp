#pragma once

// Factorial DEM database: feature-detail level S x measurement-error draw E x
// resolution factor R. Surfaces are composed and perturbed at the finest resolution,
// then block-averaged to each coarser factor.

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "floodsens/digest.hpp"
#include "floodsens/raster.hpp"
#include "floodsens/rng.hpp"

namespace floodsens {

/// One ensemble member: feature-detail level, noise draw and resolution factor.
struct DemSpec {
  int s_level = 1;
  int e_draw = 0;
  int r_factor = 1;

  friend auto operator<=>(const DemSpec&, const DemSpec&) = default;

  /// Canonical stem shared by DEM and result file names: "<s>_<e>_<r>".
  std::string stem() const {
    return std::to_string(s_level) + "_" + std::to_string(e_draw) + "_" + std::to_string(r_factor);
  }
};

struct FeatureLayer {
  std::string class_name;
  Raster increments;  // elevation increment >= 0, nodata where the feature is absent
};

/// Bare-earth DTM plus ordered feature layers (buildings, walls, thin structures).
struct FeatureStack {
  Raster dtm;
  std::vector<FeatureLayer> layers;

  void validate() const {
    for (const auto& l : layers) {
      if (!(l.increments.header() == dtm.header()))
        throw std::invalid_argument("feature layer '" + l.class_name + "' header does not match the DTM");
      for (std::size_t k = 0; k < l.increments.size(); ++k) {
        const double v = l.increments[k];
        if (v == l.increments.nodata()) continue;
        if (!std::isfinite(v) || v < 0.0)
          throw std::invalid_argument("feature layer '" + l.class_name +
                                      "' has a negative or non-finite increment");
      }
    }
  }

  int max_level() const noexcept { return static_cast<int>(layers.size()) + 1; }
};

/// Surface for level s: the DTM raised, per cell, by the largest increment among
/// layers 1..s-1. Level 1 is the DTM itself.
inline Raster compose_surface(const FeatureStack& stack, int s_level) {
  if (s_level < 1 || s_level > stack.max_level())
    throw std::invalid_argument("s_level " + std::to_string(s_level) + " outside 1.." +
                                std::to_string(stack.max_level()));
  stack.validate();
  Raster out = stack.dtm;
  if (s_level == 1) return out;
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (out.is_nodata(k)) continue;
    double raise = 0.0;
    bool covered = false;
    for (int l = 0; l < s_level - 1; ++l) {
      const auto& layer = stack.layers[static_cast<std::size_t>(l)].increments;
      const double inc = layer[k];
      if (inc == layer.nodata()) continue;
      raise = covered ? std::max(raise, inc) : inc;
      covered = true;
    }
    if (covered) out[k] += raise;
  }
  return out;
}

struct NoiseSpec {
  double sigma = 0.2;
  int n_draws = 100;
  std::uint64_t master_seed = 0;

  void validate() const {
    if (!(sigma > 0.0)) throw std::invalid_argument("noise sigma must be > 0");
    if (n_draws < 2) throw std::invalid_argument("noise n_draws must be >= 2");
  }
};

/// Noise value of one cell: N(0, sigma) keyed on (master_seed, e_draw, cell).
inline double noise_at(const NoiseSpec& spec, int e_draw, std::size_t cell) noexcept {
  return spec.sigma * counter_normal(spec.master_seed, static_cast<std::uint64_t>(e_draw), cell);
}

inline Raster generate_noise(const NoiseSpec& spec, const RasterHeader& header, int e_draw) {
  if (e_draw < 0 || e_draw >= spec.n_draws)
    throw std::invalid_argument("e_draw " + std::to_string(e_draw) + " outside [0, " +
                                std::to_string(spec.n_draws) + ")");
  Raster out(header);
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = noise_at(spec, e_draw, k);
  return out;
}

/// Perturbed finest-resolution DEM for (s, e). Nodata cells stay nodata.
inline Raster perturbed_surface(const FeatureStack& stack, const NoiseSpec& noise, int s_level, int e_draw) {
  Raster surface = compose_surface(stack, s_level);
  if (e_draw < 0 || e_draw >= noise.n_draws) throw std::invalid_argument("e_draw out of range");
  for (std::size_t k = 0; k < surface.size(); ++k)
    if (!surface.is_nodata(k)) surface[k] += noise_at(noise, e_draw, k);
  return surface;
}

struct ManifestEntry {
  DemSpec spec;
  std::string path;  // relative to the manifest directory
  std::string sha256;
  double cellsize = 0.0;
};

inline nlohmann::ordered_json to_json(const ManifestEntry& e) {
  nlohmann::ordered_json j;
  j["s"] = e.spec.s_level;
  j["e"] = e.spec.e_draw;
  j["r"] = e.spec.r_factor;
  j["path"] = e.path;
  j["sha256"] = e.sha256;
  j["cellsize"] = e.cellsize;
  return j;
}

inline ManifestEntry manifest_entry_from_json(const nlohmann::json& j) {
  ManifestEntry e;
  e.spec = {j.at("s").get<int>(), j.at("e").get<int>(), j.at("r").get<int>()};
  e.path = j.at("path").get<std::string>();
  e.sha256 = j.at("sha256").get<std::string>();
  e.cellsize = j.at("cellsize").get<double>();
  return e;
}

/// JSON-lines manifest; entries sorted by (s, e, r) once a build completes.
struct DemDatabaseManifest {
  std::filesystem::path directory;
  std::vector<ManifestEntry> entries;

  std::filesystem::path resolve(const ManifestEntry& e) const { return directory / e.path; }

  const ManifestEntry* find(const DemSpec& s) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), s,
                               [](const ManifestEntry& e, const DemSpec& v) { return e.spec < v; });
    if (it != entries.end() && it->spec == s) return &*it;
    for (const auto& e : entries)  // unsorted manifests (mid-build)
      if (e.spec == s) return &e;
    return nullptr;
  }

  void sort() {
    std::sort(entries.begin(), entries.end(),
              [](const ManifestEntry& a, const ManifestEntry& b) { return a.spec < b.spec; });
  }
};

inline DemDatabaseManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest '" + path.string() + "'");
  DemDatabaseManifest m;
  m.directory = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  std::map<DemSpec, std::size_t> index;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ManifestEntry e;
    try {
      e = manifest_entry_from_json(nlohmann::json::parse(line));
    } catch (const std::exception& ex) {
      // A torn final line from an interrupted build is dropped; anything else is an error.
      if (in.peek() == std::char_traits<char>::eof()) break;
      throw std::runtime_error(path.string() + ": line " + std::to_string(lineno) + ": " + ex.what());
    }
    if (auto it = index.find(e.spec); it != index.end())
      m.entries[it->second] = e;  // later record wins
    else {
      index.emplace(e.spec, m.entries.size());
      m.entries.push_back(e);
    }
  }
  return m;
}

inline void write_manifest(const DemDatabaseManifest& m, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write manifest '" + tmp.string() + "'");
    for (const auto& e : m.entries) out << to_json(e).dump() << '\n';
    if (!out) throw std::runtime_error("I/O failure writing manifest");
  }
  std::filesystem::rename(tmp, path);
}

struct BuildOptions {
  std::vector<int> s_levels = {1, 2, 3, 4};
  std::vector<int> r_factors = {1, 2, 3, 4, 5};
  unsigned workers = 1;
  bool resume = true;
  std::function<void(const DemSpec&, std::size_t done, std::size_t total)> on_member;
};

struct BuildReport {
  DemDatabaseManifest manifest;
  std::size_t built = 0;    // (s, e) pairs generated in this call
  std::size_t skipped = 0;  // pairs already complete from a previous call
};

inline std::string dem_file_name(const DemSpec& s) { return "dem_" + s.stem() + ".asc"; }

/// Builds (or resumes) the factorial database under out_dir:
/// out_dir/manifest.jsonl and out_dir/dems/dem_<s>_<e>_<r>.asc.
inline BuildReport build_database(const FeatureStack& stack, const NoiseSpec& noise,
                                  const std::filesystem::path& out_dir, const BuildOptions& opt = {}) {
  namespace fs = std::filesystem;
  stack.validate();
  noise.validate();
  if (opt.s_levels.empty() || opt.r_factors.empty())
    throw std::invalid_argument("s_levels and r_factors must be non-empty");
  for (int s : opt.s_levels)
    if (s < 1 || s > stack.max_level()) throw std::invalid_argument("s_level out of range");
  for (int r : opt.r_factors)
    if (r < 1) throw std::invalid_argument("r_factor must be >= 1");
  std::set<int> s_set(opt.s_levels.begin(), opt.s_levels.end());
  std::set<int> r_set(opt.r_factors.begin(), opt.r_factors.end());

  fs::create_directories(out_dir / "dems");
  const fs::path manifest_path = out_dir / "manifest.jsonl";

  DemDatabaseManifest manifest;
  manifest.directory = out_dir;
  if (opt.resume && fs::exists(manifest_path)) manifest = read_manifest(manifest_path);
  manifest.directory = out_dir;

  // An (s, e) pair is complete when every r entry exists and its file digest matches.
  std::map<DemSpec, ManifestEntry> known;
  for (const auto& e : manifest.entries) known[e.spec] = e;
  auto pair_complete = [&](int s, int e) {
    for (int r : r_set) {
      auto it = known.find({s, e, r});
      if (it == known.end()) return false;
      const fs::path p = out_dir / it->second.path;
      if (!fs::exists(p) || sha256_file(p) != it->second.sha256) return false;
    }
    return true;
  };

  std::vector<std::pair<int, int>> todo;
  BuildReport report;
  for (int s : s_set)
    for (int e = 0; e < noise.n_draws; ++e) {
      if (opt.resume && pair_complete(s, e))
        ++report.skipped;
      else
        todo.emplace_back(s, e);
    }

  // Single appender: completed entries are logged as they finish so an interrupted
  // build can resume.
  std::mutex append_mutex;
  std::ofstream log(manifest_path, std::ios::app);
  if (!log) throw std::runtime_error("cannot open manifest '" + manifest_path.string() + "'");
  std::vector<ManifestEntry> fresh;
  std::atomic<std::size_t> next{0}, done{0};
  const std::size_t total = todo.size();

  auto worker = [&] {
    for (std::size_t i = next++; i < total; i = next++) {
      const auto [s, e] = todo[i];
      Raster fine = perturbed_surface(stack, noise, s, e);
      std::vector<ManifestEntry> made;
      for (int r : r_set) {
        const DemSpec spec{s, e, r};
        Raster dem = r == 1 ? fine : resample_average(fine, r);
        ManifestEntry me{spec, (fs::path("dems") / dem_file_name(spec)).generic_string(), "", dem.cellsize()};
        const fs::path p = out_dir / me.path;
        write_raster(dem, p);
        me.sha256 = sha256_file(p);
        made.push_back(std::move(me));
      }
      std::lock_guard lock(append_mutex);
      for (const auto& me : made) {
        log << to_json(me).dump() << '\n';
        fresh.push_back(me);
      }
      log.flush();
      if (!log) throw std::runtime_error("I/O failure appending to manifest");
      const std::size_t d = ++done;
      if (opt.on_member) opt.on_member(made.front().spec, d, total);
    }
  };

  const unsigned nw = std::max(1u, std::min<unsigned>(opt.workers, static_cast<unsigned>(std::max<std::size_t>(total, 1))));
  std::vector<std::exception_ptr> errors(nw);
  {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < nw; ++w)
      pool.emplace_back([&, w] {
        try {
          worker();
        } catch (...) {
          errors[w] = std::current_exception();
          next = total;  // stop handing out work
        }
      });
    for (auto& t : pool) t.join();
  }
  log.close();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  for (const auto& me : fresh) known[me.spec] = me;
  DemDatabaseManifest final_manifest;
  final_manifest.directory = out_dir;
  for (auto& [spec, entry] : known)
    if (s_set.count(spec.s_level) && r_set.count(spec.r_factor) && spec.e_draw < noise.n_draws)
      final_manifest.entries.push_back(entry);
  final_manifest.sort();
  write_manifest(final_manifest, manifest_path);
  report.built = total;
  report.manifest = std::move(final_manifest);
  return report;
}

/// Reads a feature stack from a DTM path plus ordered (name, path) layers.
inline FeatureStack read_feature_stack(const std::filesystem::path& dtm,
                                       const std::vector<std::pair<std::string, std::filesystem::path>>& layers) {
  FeatureStack st;
  st.dtm = read_raster(dtm);
  for (const auto& [name, path] : layers) st.layers.push_back({name, read_raster(path)});
  st.validate();
  return st;
}

}  // namespace floodsens
