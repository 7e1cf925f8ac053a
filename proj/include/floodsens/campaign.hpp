#pragma once

// Monte-Carlo campaign: sampling plans over the DEM database, a resumable result
// store, the worker-pool executor and running-statistics convergence traces.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "floodsens/dem_ensemble.hpp"
#include "floodsens/digest.hpp"
#include "floodsens/raster.hpp"
#include "floodsens/rng.hpp"
#include "floodsens/swe.hpp"

namespace floodsens {

// ---------------------------------------------------------------------------
// Sampling plans

enum class PlanStrategy { uniform, stratified };

inline PlanStrategy parse_plan_strategy(const std::string& s) {
  if (s == "uniform" || s == "without_replacement_uniform") return PlanStrategy::uniform;
  if (s == "stratified" || s == "stratified_min_per_cell") return PlanStrategy::stratified;
  throw std::invalid_argument("unknown sampling strategy '" + s + "'");
}

inline const char* to_string(PlanStrategy s) { return s == PlanStrategy::uniform ? "uniform" : "stratified"; }

struct SamplingPlan {
  PlanStrategy strategy = PlanStrategy::stratified;
  std::size_t min_e_per_sr = 50;
  std::size_t budget = 0;
  std::uint64_t seed = 0;
};

/// Draws `budget` distinct specs from the manifest. The stratified strategy first takes
/// min_e_per_sr random draws in every (S, R) cell, then fills the remaining budget
/// uniformly from what is left. The returned order is itself a random permutation, so
/// any prefix of the plan is an unbiased subsample.
inline std::vector<DemSpec> draw_plan(const DemDatabaseManifest& manifest, const SamplingPlan& plan) {
  std::set<DemSpec> unique;
  for (const auto& e : manifest.entries) unique.insert(e.spec);
  std::vector<DemSpec> all(unique.begin(), unique.end());
  if (plan.budget > all.size())
    throw std::invalid_argument("budget " + std::to_string(plan.budget) + " exceeds design size " +
                                std::to_string(all.size()));
  SplitMix64 rng(plan.seed);
  std::vector<DemSpec> chosen;

  if (plan.strategy == PlanStrategy::uniform) {
    shuffle(all, rng);
    chosen.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(plan.budget));
  } else {
    std::map<std::pair<int, int>, std::vector<DemSpec>> cells;
    for (const auto& s : all) cells[{s.s_level, s.r_factor}].push_back(s);
    const std::size_t floor_total = plan.min_e_per_sr * cells.size();
    if (floor_total > plan.budget)
      throw std::invalid_argument("infeasible floor: min_e_per_sr x |S| x |R| = " + std::to_string(floor_total) +
                                  " > budget " + std::to_string(plan.budget));
    std::vector<DemSpec> rest;
    for (auto& [key, members] : cells) {
      if (members.size() < plan.min_e_per_sr)
        throw std::invalid_argument("infeasible floor: (S=" + std::to_string(key.first) +
                                    ", R=" + std::to_string(key.second) + ") has only " +
                                    std::to_string(members.size()) + " draws");
      shuffle(members, rng);
      chosen.insert(chosen.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(plan.min_e_per_sr));
      rest.insert(rest.end(), members.begin() + static_cast<std::ptrdiff_t>(plan.min_e_per_sr), members.end());
    }
    shuffle(rest, rng);
    chosen.insert(chosen.end(), rest.begin(),
                  rest.begin() + static_cast<std::ptrdiff_t>(plan.budget - chosen.size()));
  }
  shuffle(chosen, rng);
  return chosen;
}

// ---------------------------------------------------------------------------
// Result store

enum class RunStatus { done, failed };

struct RunRecord {
  DemSpec spec;
  std::string result_path;  // relative to the store directory
  RunStatus status = RunStatus::done;
  double wall_seconds = 0.0;
  std::string digest;
  std::string error;
  nlohmann::ordered_json solver;  // solver diagnostics, free-form
};

inline nlohmann::ordered_json to_json(const RunRecord& r) {
  nlohmann::ordered_json j;
  j["s"] = r.spec.s_level;
  j["e"] = r.spec.e_draw;
  j["r"] = r.spec.r_factor;
  j["status"] = r.status == RunStatus::done ? "done" : "failed";
  j["result_path"] = r.result_path;
  j["digest"] = r.digest;
  j["wall_seconds"] = r.wall_seconds;
  if (!r.error.empty()) j["error"] = r.error;
  if (!r.solver.is_null()) j["solver"] = r.solver;
  return j;
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.spec = {j.at("s").get<int>(), j.at("e").get<int>(), j.at("r").get<int>()};
  const auto status = j.at("status").get<std::string>();
  if (status != "done" && status != "failed") throw std::runtime_error("bad status '" + status + "'");
  r.status = status == "done" ? RunStatus::done : RunStatus::failed;
  r.result_path = j.value("result_path", "");
  r.digest = j.value("digest", "");
  r.wall_seconds = j.value("wall_seconds", 0.0);
  r.error = j.value("error", "");
  if (j.contains("solver")) r.solver = j.at("solver");
  return r;
}

/// store/records.jsonl (append-only log) plus store/results/<s>_<e>_<r>.asc.
/// The latest record for a spec wins; a torn final line is ignored so readers see a
/// consistent prefix while a campaign is running.
class ResultStore {
 public:
  explicit ResultStore(std::filesystem::path dir) : dir_(std::move(dir)) {}

  static ResultStore create(const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "results");
    return ResultStore(dir);
  }

  const std::filesystem::path& directory() const noexcept { return dir_; }
  std::filesystem::path records_path() const { return dir_ / "records.jsonl"; }
  std::filesystem::path resolve(const RunRecord& r) const { return dir_ / r.result_path; }
  static std::string result_name(const DemSpec& s) { return "results/" + s.stem() + ".asc"; }

  std::vector<RunRecord> records() const {
    std::vector<RunRecord> out;
    std::ifstream in(records_path());
    if (!in) return out;
    std::map<DemSpec, std::size_t> index;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      RunRecord r;
      try {
        r = run_record_from_json(nlohmann::json::parse(line));
      } catch (const std::exception& ex) {
        if (in.peek() == std::char_traits<char>::eof()) break;
        throw std::runtime_error(records_path().string() + ": line " + std::to_string(lineno) + ": " + ex.what());
      }
      if (auto it = index.find(r.spec); it != index.end())
        out[it->second] = std::move(r);
      else {
        index.emplace(r.spec, out.size());
        out.push_back(std::move(r));
      }
    }
    return out;
  }

  /// Done records sorted by spec. With verify, every result file is re-hashed and a
  /// mismatch throws.
  std::vector<RunRecord> done_records(bool verify = false) const {
    std::vector<RunRecord> out;
    for (auto& r : records())
      if (r.status == RunStatus::done) out.push_back(std::move(r));
    std::sort(out.begin(), out.end(), [](const RunRecord& a, const RunRecord& b) { return a.spec < b.spec; });
    if (verify)
      for (const auto& r : out)
        if (!std::filesystem::exists(resolve(r)) || sha256_file(resolve(r)) != r.digest)
          throw std::runtime_error("digest mismatch for result '" + r.result_path + "'");
    return out;
  }

  void append(const RunRecord& r) {
    std::lock_guard lock(mutex_);
    const std::string line = to_json(r).dump() + "\n";
    std::ofstream out(records_path(), std::ios::app | std::ios::binary);
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.flush();
    if (!out) throw std::runtime_error("I/O failure appending to '" + records_path().string() + "'");
  }

 private:
  std::filesystem::path dir_;
  std::mutex mutex_;
};

// ---------------------------------------------------------------------------
// Execution

struct RunOutput {
  Raster max_depth;
  nlohmann::ordered_json solver;
};

using RunFunction = std::function<RunOutput(const DemSpec&)>;

struct ExecuteOptions {
  unsigned workers = 1;
  bool verify_existing = true;
  /// Stop dispatching after this many new runs; used to emulate an interrupted campaign.
  std::optional<std::size_t> max_new_runs;
  std::function<void(const RunRecord&, std::size_t finished, std::size_t total)> on_record;
};

struct CampaignSummary {
  std::size_t planned = 0;
  std::size_t done = 0;     // done records for plan specs after this call
  std::size_t failed = 0;   // failed in this call
  std::size_t ran = 0;      // runs attempted in this call
  std::size_t skipped = 0;  // already done before this call
  double run_wall_seconds = 0.0;
  double elapsed_seconds = 0.0;
};

inline CampaignSummary execute(const std::vector<DemSpec>& plan, const RunFunction& run, ResultStore& store,
                               const ExecuteOptions& opt = {}) {
  namespace fs = std::filesystem;
  const auto t0 = std::chrono::steady_clock::now();
  {
    std::set<DemSpec> seen;
    for (const auto& s : plan)
      if (!seen.insert(s).second) throw std::invalid_argument("plan contains duplicate spec " + s.stem());
  }
  fs::create_directories(store.directory() / "results");

  std::map<DemSpec, RunRecord> previous;
  for (auto& r : store.records()) previous.emplace(r.spec, std::move(r));
  auto already_done = [&](const DemSpec& s) {
    auto it = previous.find(s);
    if (it == previous.end() || it->second.status != RunStatus::done) return false;
    if (!opt.verify_existing) return true;
    const fs::path p = store.resolve(it->second);
    return fs::exists(p) && sha256_file(p) == it->second.digest;
  };

  CampaignSummary summary;
  summary.planned = plan.size();
  std::vector<DemSpec> todo;
  for (const auto& s : plan) {
    if (already_done(s))
      ++summary.skipped;
    else
      todo.push_back(s);
  }
  if (opt.max_new_runs && todo.size() > *opt.max_new_runs) todo.resize(*opt.max_new_runs);

  std::atomic<std::size_t> next{0}, finished{0}, failed{0}, done{0};
  std::mutex wall_mutex;
  double wall_total = 0.0;
  const std::size_t total = todo.size();

  auto worker = [&] {
    for (std::size_t i = next++; i < total; i = next++) {
      const DemSpec spec = todo[i];
      RunRecord rec;
      rec.spec = spec;
      rec.result_path = ResultStore::result_name(spec);
      const auto start = std::chrono::steady_clock::now();
      try {
        RunOutput out = run(spec);
        write_raster(out.max_depth, store.resolve(rec));
        rec.digest = sha256_file(store.resolve(rec));
        rec.solver = std::move(out.solver);
        rec.status = RunStatus::done;
        ++done;
      } catch (const std::exception& ex) {
        rec.status = RunStatus::failed;
        rec.error = ex.what();
        ++failed;
      }
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      store.append(rec);
      {
        std::lock_guard lock(wall_mutex);
        wall_total += rec.wall_seconds;
      }
      const std::size_t f = ++finished;
      if (opt.on_record) opt.on_record(rec, f, total);
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
          next = total;
        }
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  summary.ran = total;
  summary.failed = failed;
  summary.done = summary.skipped + done;
  summary.run_wall_seconds = wall_total;
  summary.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return summary;
}

/// Runner backed by the built-in solver: loads the member DEM from the manifest and
/// returns its maximum-depth raster.
inline RunFunction solver_runner(const DemDatabaseManifest& manifest, const swe::SolverConfig& config,
                                 const swe::BoundarySpec& bc, const swe::Hydrograph& hydrograph,
                                 swe::InitialCondition initial = swe::InitialCondition::dry) {
  return [manifest, config, bc, hydrograph, initial](const DemSpec& spec) {
    const ManifestEntry* entry = manifest.find(spec);
    if (!entry) throw std::runtime_error("spec " + spec.stem() + " not in manifest");
    Raster dem = read_raster(manifest.resolve(*entry));
    swe::RunResult res = swe::run_simulation(dem, config, bc, hydrograph, initial);
    const auto& s = res.summary;
    nlohmann::ordered_json info;
    info["steps"] = s.steps;
    info["dt_min"] = s.dt_min;
    info["dt_max"] = s.dt_max;
    info["mass_balance_error"] = s.mass_balance_error;
    info["spinup_time"] = s.spinup_time;
    info["spinup_converged"] = s.spinup_converged;
    return RunOutput{std::move(res.max_depth), std::move(info)};
  };
}

/// Checks that every plan spec is in the manifest with its DEM file present.
inline void check_plan_inputs(const DemDatabaseManifest& manifest, const std::vector<DemSpec>& plan) {
  for (const auto& s : plan) {
    const ManifestEntry* e = manifest.find(s);
    if (!e) throw std::invalid_argument("spec " + s.stem() + " not in manifest");
    if (!std::filesystem::exists(manifest.resolve(*e)))
      throw std::invalid_argument("missing DEM file '" + manifest.resolve(*e).string() + "'");
  }
}

inline CampaignSummary execute(const std::vector<DemSpec>& plan, const DemDatabaseManifest& manifest,
                               const swe::SolverConfig& config, const swe::BoundarySpec& bc,
                               const swe::Hydrograph& hydrograph, ResultStore& store, ExecuteOptions opt = {},
                               swe::InitialCondition initial = swe::InitialCondition::dry) {
  check_plan_inputs(manifest, plan);
  swe::SolverConfig per_run = config;
  per_run.threads = 1;  // parallelism comes from the worker pool
  return execute(plan, solver_runner(manifest, per_run, bc, hydrograph, initial), store, opt);
}

// ---------------------------------------------------------------------------
// Probes and convergence

struct Probe {
  std::string id;
  double x = 0.0;
  double y = 0.0;
  std::string label;
};

struct ProbeSet {
  std::vector<Probe> probes;

  void validate() const {
    std::set<std::string> ids;
    for (const auto& p : probes) {
      if (p.id.empty()) throw std::invalid_argument("probe with empty id");
      if (!ids.insert(p.id).second) throw std::invalid_argument("duplicate probe id '" + p.id + "'");
      if (!std::isfinite(p.x) || !std::isfinite(p.y))
        throw std::invalid_argument("probe '" + p.id + "' has non-finite coordinates");
    }
  }

  void validate_inside(const RasterHeader& h) const {
    validate();
    for (const auto& p : probes)
      if (!contains(h, p.x, p.y)) throw std::invalid_argument("probe '" + p.id + "' outside the domain");
  }
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.emplace_back(trim(cur));
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.emplace_back(trim(cur));
  return out;
}

}  // namespace detail

/// CSV with columns id,x,y,label; a header line starting with "id" is skipped.
inline ProbeSet read_probes_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open probes file '" + path.string() + "'");
  ProbeSet set;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (detail::trim(line).empty()) continue;
    auto f = detail::split_csv(line);
    if (lineno == 1 && detail::lower(f[0]) == "id") continue;
    if (f.size() < 3) throw std::runtime_error(path.string() + ": line " + std::to_string(lineno) + ": expected id,x,y[,label]");
    Probe p;
    p.id = f[0];
    if (!detail::parse_double(f[1], p.x) || !detail::parse_double(f[2], p.y))
      throw std::runtime_error(path.string() + ": line " + std::to_string(lineno) + ": non-numeric coordinate");
    if (f.size() > 3) p.label = f[3];
    set.probes.push_back(std::move(p));
  }
  set.validate();
  return set;
}

inline void write_probes_csv(const ProbeSet& set, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write probes file '" + path.string() + "'");
  out << "id,x,y,label\n";
  for (const auto& p : set.probes) out << p.id << ',' << format_value(p.x) << ',' << format_value(p.y) << ',' << p.label << '\n';
}

struct TracePoint {
  std::size_t n = 0;
  double mean = 0.0;
  double var = 0.0;  // unbiased; 0 for n = 1
};

/// Welford running mean and variance.
inline std::vector<TracePoint> running_stats(const std::vector<double>& values) {
  std::vector<TracePoint> out;
  out.reserve(values.size());
  double mean = 0.0, m2 = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double n = static_cast<double>(i + 1);
    const double d = values[i] - mean;
    mean += d / n;
    m2 += d * (values[i] - mean);
    out.push_back({i + 1, mean, i == 0 ? 0.0 : std::max(0.0, m2 / (n - 1.0))});
  }
  return out;
}

struct ProbeTrace {
  Probe probe;
  std::vector<double> values;  // Y at the probe, in trace order
  std::vector<TracePoint> trace;
};

/// Y at each probe for each done record, in record order.
inline std::vector<std::vector<double>> probe_values(const ResultStore& store, const std::vector<RunRecord>& records,
                                                     const ProbeSet& probes) {
  std::vector<std::vector<double>> out(probes.probes.size());
  for (const auto& r : records) {
    Raster y = read_raster(store.resolve(r));
    for (std::size_t p = 0; p < probes.probes.size(); ++p) {
      const auto& pr = probes.probes[p];
      if (!contains(y.header(), pr.x, pr.y))
        throw std::out_of_range("probe '" + pr.id + "' outside result raster " + r.result_path);
      const double v = sample_at(y, pr.x, pr.y);
      if (v == y.nodata()) throw std::runtime_error("probe '" + pr.id + "' hits nodata in " + r.result_path);
      out[p].push_back(v);
    }
  }
  return out;
}

/// Running statistics at each probe over a seeded random permutation of done records.
inline std::vector<ProbeTrace> convergence_trace(const ResultStore& store, const ProbeSet& probes,
                                                 std::uint64_t order_seed) {
  probes.validate();
  auto records = store.done_records();
  if (records.size() < 2) throw std::invalid_argument("convergence trace needs at least 2 done records");
  const auto perm = random_permutation(records.size(), order_seed);
  std::vector<RunRecord> ordered;
  ordered.reserve(records.size());
  for (auto i : perm) ordered.push_back(records[i]);
  auto values = probe_values(store, ordered, probes);
  std::vector<ProbeTrace> out;
  for (std::size_t p = 0; p < probes.probes.size(); ++p)
    out.push_back({probes.probes[p], values[p], running_stats(values[p])});
  return out;
}

/// Smallest N from which the running mean stays within tol * |final mean| of the final
/// mean, with a full trailing window of `window` samples inside the band. When the final
/// mean is 0 the band is the absolute tolerance tol. Returns nullopt if never satisfied.
inline std::optional<std::size_t> stabilization_N(const std::vector<double>& means, std::size_t window, double tol) {
  if (window == 0) throw std::invalid_argument("window must be >= 1");
  if (means.size() < window) throw std::invalid_argument("trace shorter than window");
  const double final_mean = means.back();
  const double band = final_mean == 0.0 ? tol : tol * std::fabs(final_mean);
  std::size_t first_inside = means.size();  // 0-based index from which all remain inside
  for (std::size_t i = means.size(); i-- > 0;) {
    if (!(std::fabs(means[i] - final_mean) <= band)) break;
    first_inside = i;
  }
  const std::size_t n = std::max(window, first_inside + window);  // 1-based end of first full window
  if (n > means.size()) return std::nullopt;
  return n;
}

inline std::optional<std::size_t> stabilization_N(const std::vector<TracePoint>& trace, std::size_t window, double tol) {
  std::vector<double> means;
  means.reserve(trace.size());
  for (const auto& t : trace) means.push_back(t.mean);
  return stabilization_N(means, window, tol);
}

}  // namespace floodsens
