// floodsens: command-line driver for the DEM ensemble / flood simulation / GSA pipeline.
//
// Exit codes: 0 success, 1 validation failure (bad arguments, invalid config, missing
// inputs), 2 runtime failure (I/O errors, failed runs, anything raised mid-work).

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "floodsens/campaign.hpp"
#include "floodsens/config.hpp"
#include "floodsens/dem_ensemble.hpp"
#include "floodsens/fixture.hpp"
#include "floodsens/gsa.hpp"

namespace fs = std::filesystem;
using namespace floodsens;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInvalid = 1;
constexpr int kExitRuntime = 2;

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", &tm);
  std::ostringstream out;
  out << buf << '.' << std::setw(3) << std::setfill('0') << ms << 'Z';
  return out.str();
}

// JSON-lines on stderr, plain progress on stdout.
class Log {
 public:
  std::string command = "floodsens";
  bool quiet = false;

  void event(const char* level, const std::string& name, const ojson& fields = ojson::object()) {
    ojson j;
    j["ts"] = timestamp();
    j["level"] = level;
    j["cmd"] = command;
    j["event"] = name;
    for (auto it = fields.begin(); it != fields.end(); ++it) j[it.key()] = it.value();
    const std::string line = j.dump() + "\n";
    std::lock_guard lock(mutex_);
    std::cerr.write(line.data(), static_cast<std::streamsize>(line.size()));
    std::cerr.flush();
  }
  void info(const std::string& name, const ojson& f = ojson::object()) { event("info", name, f); }
  void warn(const std::string& name, const ojson& f = ojson::object()) { event("warn", name, f); }
  void error(const std::string& name, const ojson& f = ojson::object()) { event("error", name, f); }

  void say(const std::string& line) {
    if (quiet) return;
    std::lock_guard lock(mutex_);
    std::cout << line << '\n' << std::flush;
  }

 private:
  std::mutex mutex_;
};

Log g_log;

PipelineConfig load_config(const fs::path& path) {
  ConfigResult r;
  try {
    r = validate_config(path);
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }
  if (!r.ok()) {
    for (const auto& d : r.diagnostics) {
      g_log.error("config_invalid", {{"field", d.field}, {"message", d.message}});
      g_log.say("  " + d.field + ": " + d.message);
    }
    throw ValidationError("invalid config '" + path.string() + "' (" + std::to_string(r.diagnostics.size()) +
                          " problem(s))");
  }
  g_log.info("config_loaded", {{"path", path.string()}});
  return *r.config;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream o;
  o << std::setprecision(prec) << v;
  return o.str();
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  out << std::setprecision(17);
  return out;
}

void close_out(std::ofstream& out, const fs::path& p) {
  out.close();
  if (!out) throw std::runtime_error("I/O failure writing '" + p.string() + "'");
}

std::string num_or_empty(double v) { return std::isnan(v) ? std::string() : format_value(v); }

std::string si_text(const FactorSi& s) { return s.status == SiStatus::ok ? fmt(s.value, 3) : to_string(s.status); }

ProbeSet load_probes(const fs::path& p, const ResultStore& store) {
  ProbeSet probes;
  try {
    probes = read_probes_csv(p);
    probes.validate();
    auto done = store.done_records();
    if (!done.empty()) probes.validate_inside(read_raster(store.resolve(done.front())).header());
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }
  return probes;
}

// ---------------------------------------------------------------------------

struct FixtureArgs {
  fs::path out;
  std::string size = "small";
  std::uint64_t seed = 2024;
};

int cmd_gen_fixture(const FixtureArgs& a) {
  FixtureSize size;
  try {
    size = parse_fixture_size(a.size);
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }
  auto fx = demo_fixture(size, a.seed);
  auto files = write_fixture(fx, a.out);
  auto cfg = load_config(files.config);
  write_provenance(cfg, a.out, {{"command", "gen-fixture"}, {"size", a.size}, {"seed", a.seed}});
  g_log.info("fixture_written", {{"dir", a.out.string()}, {"size", a.size}, {"seed", a.seed},
                                 {"ncols", fx.stack.dtm.ncols()}, {"probes", fx.probes.probes.size()}});
  g_log.say("fixture (" + a.size + ", " + std::to_string(fx.stack.dtm.ncols()) + "x" +
            std::to_string(fx.stack.dtm.nrows()) + ") written to " + a.out.string());
  g_log.say("config: " + files.config.string());
  return kExitOk;
}

struct GenDemsArgs {
  fs::path config;
  fs::path out;
  std::optional<unsigned> workers;
  bool resume = false;
};

int cmd_gen_dems(const GenDemsArgs& a) {
  auto c = load_config(a.config);
  if (!a.out.empty()) c.database = a.out;
  const unsigned workers = a.workers.value_or(c.workers);
  std::vector<std::pair<std::string, fs::path>> layers;
  for (const auto& l : c.layers) layers.emplace_back(l.name, l.path);
  FeatureStack stack;
  try {
    stack = read_feature_stack(c.dtm, layers);
  } catch (const std::exception& e) {
    throw ValidationError(std::string("feature stack: ") + e.what());
  }
  BuildOptions opt;
  opt.s_levels = c.s_levels;
  opt.r_factors = c.r_factors;
  opt.workers = workers;
  opt.resume = a.resume;
  opt.on_member = [](const DemSpec& s, std::size_t done, std::size_t total) {
    g_log.say("[" + std::to_string(done) + "/" + std::to_string(total) + "] s=" + std::to_string(s.s_level) +
              " e=" + std::to_string(s.e_draw));
  };
  g_log.info("gen_dems_start", {{"database", c.database.string()}, {"design_size", c.design_size()},
                                {"workers", workers}, {"resume", a.resume}});
  const auto t0 = std::chrono::steady_clock::now();
  auto rep = build_database(stack, c.noise, c.database, opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_provenance(c, c.database, {{"command", "gen-dems"}, {"members", rep.manifest.entries.size()}});
  g_log.info("gen_dems_done", {{"members", rep.manifest.entries.size()}, {"built", rep.built},
                               {"skipped", rep.skipped}, {"seconds", secs}});
  g_log.say("database " + c.database.string() + ": " + std::to_string(rep.manifest.entries.size()) + " DEMs (" +
            std::to_string(rep.built) + " built, " + std::to_string(rep.skipped) + " reused) in " + fmt(secs, 3) +
            " s");
  return kExitOk;
}

struct RunArgs {
  fs::path config;
  fs::path manifest;
  fs::path store;
  std::optional<unsigned> workers;
  std::optional<std::size_t> max_runs;
};

int cmd_run(const RunArgs& a) {
  auto c = load_config(a.config);
  if (!a.store.empty()) c.store = a.store;
  const fs::path manifest_path = a.manifest.empty() ? c.manifest_path() : a.manifest;
  const unsigned workers = a.workers.value_or(c.workers);
  DemDatabaseManifest manifest;
  std::vector<DemSpec> plan;
  swe::Hydrograph hydro;
  try {
    if (!fs::exists(manifest_path))
      throw std::invalid_argument("manifest not found: " + manifest_path.string() + " (run gen-dems first)");
    manifest = read_manifest(manifest_path);
    plan = draw_plan(manifest, c.sampling);
    check_plan_inputs(manifest, plan);
    hydro = swe::read_hydrograph_csv(c.hydrograph.string());
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }
  auto store = ResultStore::create(c.store);
  {
    const fs::path p = c.store / "plan.csv";
    auto out = open_out(p);
    out << "s,e,r\n";
    for (const auto& s : plan) out << s.s_level << ',' << s.e_draw << ',' << s.r_factor << '\n';
    close_out(out, p);
  }
  write_provenance(c, c.store,
                   {{"command", "run"}, {"manifest", manifest_path.string()}, {"planned", plan.size()}});
  g_log.info("run_start", {{"store", c.store.string()}, {"planned", plan.size()}, {"workers", workers},
                           {"strategy", to_string(c.sampling.strategy)}});
  ExecuteOptions opt;
  opt.workers = workers;
  opt.max_new_runs = a.max_runs;
  opt.on_record = [](const RunRecord& r, std::size_t finished, std::size_t total) {
    ojson f = {{"spec", r.spec.stem()}, {"status", r.status == RunStatus::done ? "done" : "failed"},
               {"wall_seconds", r.wall_seconds}};
    if (r.status == RunStatus::done) {
      g_log.info("run_finished", f);
    } else {
      f["error"] = r.error;
      g_log.error("run_failed", f);
    }
    g_log.say("[" + std::to_string(finished) + "/" + std::to_string(total) + "] " + r.spec.stem() + " " +
              (r.status == RunStatus::done ? "done" : "FAILED: " + r.error) + " (" + fmt(r.wall_seconds, 3) + " s)");
  };
  auto sum = execute(plan, manifest, c.solver, c.boundaries, hydro, store, opt, c.initial);
  g_log.info("run_done", {{"planned", sum.planned}, {"done", sum.done}, {"failed", sum.failed}, {"ran", sum.ran},
                          {"skipped", sum.skipped}, {"elapsed_seconds", sum.elapsed_seconds}});
  g_log.say("campaign: " + std::to_string(sum.done) + "/" + std::to_string(sum.planned) + " done, " +
            std::to_string(sum.ran) + " ran, " + std::to_string(sum.skipped) + " resumed, " +
            std::to_string(sum.failed) + " failed, " + fmt(sum.elapsed_seconds, 4) + " s");
  return sum.failed > 0 ? kExitRuntime : kExitOk;
}

// ---------------------------------------------------------------------------

struct ConvergenceArgs {
  fs::path config;
  fs::path store;
  fs::path probes;
  fs::path out;
  std::optional<std::uint64_t> order_seed;
  std::optional<std::size_t> window;
  std::optional<double> tol;
  bool svg = false;
};

void write_trace_svg(const ProbeTrace& t, double tol, std::optional<std::size_t> n_star, const fs::path& p) {
  const double W = 640, H = 360, m = 40;
  const double final_mean = t.trace.back().mean;
  const double band = final_mean == 0.0 ? tol : tol * std::fabs(final_mean);
  double lo = final_mean - band, hi = final_mean + band;
  for (const auto& x : t.trace) {
    lo = std::min(lo, x.mean);
    hi = std::max(hi, x.mean);
  }
  if (hi == lo) hi = lo + 1.0;
  const double n = static_cast<double>(t.trace.size());
  auto X = [&](double i) { return m + (W - 2 * m) * (i - 1.0) / std::max(1.0, n - 1.0); };
  auto Y = [&](double v) { return H - m - (H - 2 * m) * (v - lo) / (hi - lo); };
  auto out = open_out(p);
  out << std::setprecision(6);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << m << "\" y=\"20\" font-size=\"13\">" << t.probe.id << " running mean of max depth</text>\n";
  for (double v : {final_mean - band, final_mean + band})
    out << "<line x1=\"" << m << "\" x2=\"" << W - m << "\" y1=\"" << Y(v) << "\" y2=\"" << Y(v)
        << "\" stroke=\"gray\" stroke-dasharray=\"4 3\"/>\n";
  if (n_star)
    out << "<line x1=\"" << X(double(*n_star)) << "\" x2=\"" << X(double(*n_star)) << "\" y1=\"" << m << "\" y2=\""
        << H - m << "\" stroke=\"red\"/>\n";
  out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < t.trace.size(); ++i) out << X(double(i + 1)) << ',' << Y(t.trace[i].mean) << ' ';
  out << "\"/>\n";
  out << "<text x=\"" << m << "\" y=\"" << H - 10 << "\" font-size=\"11\">N = 1.." << t.trace.size()
      << ", band = final mean +/- " << tol * 100.0 << "%</text>\n</svg>\n";
  close_out(out, p);
}

int cmd_convergence(const ConvergenceArgs& a) {
  PipelineConfig c;
  if (!a.config.empty()) c = load_config(a.config);
  if (!a.store.empty()) c.store = a.store;
  if (!a.probes.empty()) c.probes = a.probes;
  if (a.order_seed) c.convergence.order_seed = *a.order_seed;
  if (a.window) c.convergence.window = *a.window;
  if (a.tol) c.convergence.tol = *a.tol;
  if (c.store.empty() || c.probes.empty()) throw ValidationError("convergence needs --store and --probes (or --config)");
  if (!fs::exists(ResultStore(c.store).records_path()))
    throw ValidationError("no records in store '" + c.store.string() + "'");
  if (c.convergence.window && *c.convergence.window == 0) throw ValidationError("window must be >= 1");
  if (!(c.convergence.tol > 0.0)) throw ValidationError("tol must be > 0");
  const fs::path out = a.out.empty() ? c.store / "convergence" : a.out;

  ResultStore store(c.store);
  auto probes = load_probes(c.probes, store);
  auto traces = convergence_trace(store, probes, c.convergence.order_seed);
  const std::size_t n = traces.front().values.size();
  const std::size_t window =
      c.convergence.window.value_or(std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.1 * double(n)))));
  if (window > n) throw ValidationError("window " + std::to_string(window) + " exceeds sample count " + std::to_string(n));
  fs::create_directories(out);

  auto tp = out / "traces.csv";
  auto tr = open_out(tp);
  tr << "id,n,value,mean,var\n";
  for (const auto& t : traces)
    for (std::size_t i = 0; i < t.trace.size(); ++i)
      tr << t.probe.id << ',' << t.trace[i].n << ',' << format_value(t.values[i]) << ',' << format_value(t.trace[i].mean)
         << ',' << format_value(t.trace[i].var) << '\n';
  close_out(tr, tp);

  auto sp = out / "stabilization.csv";
  auto st = open_out(sp);
  st << "id,label,n_total,window,tol,final_mean,stabilization_n\n";
  std::size_t stable = 0;
  g_log.say("probe  label     final mean   N*   (of " + std::to_string(n) + ", window " + std::to_string(window) + ")");
  for (const auto& t : traces) {
    const auto n_star = stabilization_N(t.trace, window, c.convergence.tol);
    stable += n_star && *n_star < n;
    st << t.probe.id << ',' << t.probe.label << ',' << n << ',' << window << ',' << format_value(c.convergence.tol)
       << ',' << format_value(t.trace.back().mean) << ',' << (n_star ? std::to_string(*n_star) : "") << '\n';
    g_log.info("stabilization", {{"probe", t.probe.id}, {"final_mean", t.trace.back().mean},
                                 {"n", n_star ? ojson(*n_star) : ojson(nullptr)}});
    std::ostringstream line;
    line << std::left << std::setw(7) << t.probe.id << std::setw(10) << t.probe.label << std::setw(13)
         << fmt(t.trace.back().mean) << (n_star ? std::to_string(*n_star) : "-");
    g_log.say(line.str());
    if (a.svg) write_trace_svg(t, c.convergence.tol, n_star, out / ("trace_" + t.probe.id + ".svg"));
  }
  close_out(st, sp);
  write_provenance(c, out, {{"command", "convergence"}, {"samples", n}, {"window", window}});
  g_log.info("convergence_done", {{"probes", traces.size()}, {"stabilized_before_budget", stable}, {"out", out.string()}});
  g_log.say(std::to_string(stable) + "/" + std::to_string(traces.size()) +
            " probes stabilized before the full sample; outputs in " + out.string());
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct AnalyzeArgs {
  fs::path config;
  fs::path store;
  fs::path probes;
  fs::path out;
  std::optional<double> cellsize;
  std::optional<std::string> method;
  std::optional<std::size_t> boot;
  std::optional<std::size_t> boot_n;
  std::optional<std::size_t> min_samples;
  std::optional<std::string> policy;
  std::optional<unsigned> workers;
  bool exclude_buildings = false;
};

int cmd_analyze(const AnalyzeArgs& a) {
  PipelineConfig c;
  if (!a.config.empty()) c = load_config(a.config);
  if (!a.store.empty()) c.store = a.store;
  if (!a.probes.empty()) c.probes = a.probes;
  auto& an = c.analysis;
  try {
    if (a.cellsize) an.cellsize = *a.cellsize;
    if (a.method) an.method = parse_resample_method(*a.method);
    if (a.boot) an.boot = *a.boot;
    if (a.boot_n) an.boot_n = *a.boot_n;
    if (a.min_samples) an.min_samples = *a.min_samples;
    if (a.policy) {
      if (*a.policy == "strict") an.policy = LevelPolicy::strict;
      else if (*a.policy == "pool") an.policy = LevelPolicy::pool;
      else throw std::invalid_argument("unknown level policy '" + *a.policy + "'");
    }
  } catch (const std::exception& e) {
    throw ValidationError(e.what());
  }
  if (a.exclude_buildings) an.exclude_buildings = true;
  if (!a.out.empty()) an.out = a.out;
  if (an.out.empty()) an.out = c.store / "analysis";
  const unsigned workers = a.workers.value_or(c.workers);
  if (c.store.empty()) throw ValidationError("analyze needs --store (or --config)");
  if (!(an.cellsize > 0.0)) throw ValidationError("cellsize must be > 0");
  if (an.boot == 0) throw ValidationError("boot must be >= 1");

  ResultStore store(c.store);
  if (!fs::exists(store.records_path())) throw ValidationError("no records in store '" + c.store.string() + "'");
  const auto all = store.records();
  const auto done = store.done_records(true);
  const std::size_t failed = all.size() - done.size();
  if (failed) g_log.warn("failed_runs_excluded", {{"count", failed}});
  if (done.size() < an.min_samples)
    throw ValidationError("store has " + std::to_string(done.size()) + " done runs, below min_samples " +
                          std::to_string(an.min_samples));
  ProbeSet probes;
  if (!c.probes.empty()) probes = load_probes(c.probes, store);
  if (!probes.probes.empty() && an.boot_n > done.size())
    throw ValidationError("boot-n " + std::to_string(an.boot_n) + " exceeds done runs " + std::to_string(done.size()));

  g_log.info("analyze_start", {{"store", c.store.string()}, {"runs", done.size()}, {"failed", failed},
                               {"cellsize", an.cellsize}, {"method", to_string(an.method)}, {"workers", workers}});
  const auto t0 = std::chrono::steady_clock::now();
  auto aligned = align_outputs(store, an.cellsize, an.method, workers);
  g_log.say("aligned " + std::to_string(aligned.size()) + " runs onto " + std::to_string(aligned.header.ncols) + "x" +
            std::to_string(aligned.header.nrows) + " grid at " + fmt(an.cellsize) + " m (" + to_string(an.method) + ")");
  fs::create_directories(an.out);

  auto ua = ua_stats(aligned, an.wet_depth, workers);
  write_raster(ua.mean, an.out / "mean.asc");
  write_raster(ua.variance, an.out / "var.asc");

  MapOptions mo;
  mo.exclude_dry = an.exclude_dry;
  mo.wet_depth = an.wet_depth;
  mo.exclude_buildings = an.exclude_buildings;
  mo.min_samples = an.min_samples;
  mo.sobol = {an.policy, an.bias_correction};
  mo.workers = workers;
  if (an.exclude_buildings) {
    auto it = std::find_if(c.layers.begin(), c.layers.end(), [](const LayerPath& l) { return l.name == "buildings"; });
    if (it == c.layers.end()) throw ValidationError("exclude_buildings needs a 'buildings' layer in the config");
    mo.building_footprint = footprint_on_grid(read_raster(it->path), aligned.header, an.method);
  }
  auto maps = sobol_maps(aligned, mo);
  const char* names[3] = {"S", "R", "E"};
  for (std::size_t f = 0; f < 3; ++f) write_raster(maps.si[f], an.out / (std::string("si_") + names[f] + ".asc"));
  write_raster(maps.argmax, an.out / "si_argmax.asc");
  {
    const fs::path p = an.out / "si_hist.csv";
    auto out = open_out(p);
    out << "factor,bin_lo,bin_hi,count\n";
    for (std::size_t f = 0; f < 3; ++f)
      for (const auto& b : maps.histograms[f])
        out << names[f] << ',' << format_value(b.lo) << ',' << format_value(b.hi) << ',' << b.count << '\n';
    close_out(out, p);
  }
  g_log.say("Si maps: " + std::to_string(maps.defined_cells) + " cells ranked, " + std::to_string(maps.masked_cells) +
            " masked; argmax share S " + fmt(maps.area_fraction[0], 3) + ", R " + fmt(maps.area_fraction[1], 3) +
            ", E " + fmt(maps.area_fraction[2], 3));

  ojson probe_summary = ojson::array();
  std::size_t bimodal = 0;
  if (!probes.probes.empty()) {
    auto values = probe_values(store, done, probes);
    const fs::path p = an.out / "probes_si.csv";
    auto out = open_out(p);
    out << "id,si_S,ci_lo,ci_hi,si_R,ci_lo_R,ci_hi_R,si_E,ci_lo_E,ci_hi_E,status_S,status_R,status_E,"
           "reliable_S,reliable_R,reliable_E,n,mean,var,dip,dip_threshold,bimodal,label\n";
    for (std::size_t i = 0; i < probes.probes.size(); ++i) {
      const auto& pr = probes.probes[i];
      std::vector<Sample> samples;
      for (std::size_t k = 0; k < done.size(); ++k) samples.push_back({done[k].spec, values[i][k]});
      const auto est = sobol_first_order(samples, mo.sobol);
      const auto ci = bootstrap_ci(samples, an.boot, an.boot_n, an.level,
                                   hash_counters(an.seed, i, 0, 0x70726f6265ULL), mo.sobol, workers);
      const auto mod = bimodality(values[i]);
      bimodal += mod.bimodal;
      double var = 0.0;
      for (const auto& t : running_stats(values[i])) var = t.var;
      out << pr.id;
      for (Factor f : kFactors) {
        out << ',' << (est[f].status == SiStatus::ok ? format_value(est[f].value) : "") << ','
            << num_or_empty(ci[f].low) << ',' << num_or_empty(ci[f].high);
      }
      for (Factor f : kFactors) out << ',' << to_string(est[f].status);
      for (Factor f : kFactors) out << ',' << (ci[f].reliable ? "true" : "false");
      out << ',' << samples.size() << ',' << format_value(est.mean_y) << ',' << format_value(var) << ','
          << format_value(mod.dip) << ',' << format_value(mod.threshold) << ',' << (mod.bimodal ? "true" : "false")
          << ',' << pr.label << '\n';

      const fs::path hp = an.out / ("probe_" + pr.id + "_hist.csv");
      auto ho = open_out(hp);
      ho << "bin_lo,bin_hi,count\n";
      for (const auto& b : histogram(values[i], an.hist_bin))
        ho << format_value(b.lo) << ',' << format_value(b.hi) << ',' << b.count << '\n';
      close_out(ho, hp);

      ojson ps = {{"probe", pr.id}, {"si_S", est[Factor::S].value}, {"ci_S", {ci[Factor::S].low, ci[Factor::S].high}},
                  {"si_R", est[Factor::R].value}, {"si_E", est[Factor::E].value}, {"bimodal", mod.bimodal}};
      for (auto it = ps.begin(); it != ps.end(); ++it)
        if (it.value().is_number_float() && std::isnan(it.value().get<double>())) it.value() = nullptr;
      g_log.info("probe_si", ps);
      probe_summary.push_back(ps);
      std::string line = pr.id + ": Si S " + si_text(est[Factor::S]);
      if (ci[Factor::S].kept) line += " [" + fmt(ci[Factor::S].low, 3) + ", " + fmt(ci[Factor::S].high, 3) + "]";
      g_log.say(line + "  R " + si_text(est[Factor::R]) + "  E " + si_text(est[Factor::E]) +
                (mod.bimodal ? "  bimodal" : ""));
    }
    close_out(out, p);
  }

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  ojson summary;
  summary["runs_used"] = done.size();
  summary["runs_failed"] = failed;
  summary["cellsize"] = an.cellsize;
  summary["method"] = to_string(an.method);
  summary["grid"] = {{"ncols", aligned.header.ncols}, {"nrows", aligned.header.nrows}};
  summary["defined_cells"] = maps.defined_cells;
  summary["masked_cells"] = maps.masked_cells;
  summary["insufficient"] = {{"S", maps.insufficient[0]}, {"R", maps.insufficient[1]}, {"E", maps.insufficient[2]}};
  summary["argmax_area_fraction"] = {
      {"S", maps.area_fraction[0]}, {"R", maps.area_fraction[1]}, {"E", maps.area_fraction[2]}};
  summary["probes_bimodal"] = bimodal;
  {
    const fs::path p = an.out / "summary.json";
    auto out = open_out(p);
    out << summary.dump(2) << '\n';
    close_out(out, p);
  }
  write_provenance(c, an.out, {{"command", "analyze"}, {"runs_used", done.size()}, {"runs_failed", failed}});
  g_log.info("analyze_done", {{"out", an.out.string()}, {"seconds", secs}, {"defined_cells", maps.defined_cells},
                              {"probes_bimodal", bimodal}});
  g_log.say("analysis written to " + an.out.string() + " (" + fmt(secs, 3) + " s)");
  return kExitOk;
}

int cmd_validate(const fs::path& config) {
  auto c = load_config(config);
  g_log.say("config OK: " + config.string());
  g_log.say("  design " + std::to_string(c.s_levels.size()) + " S x " + std::to_string(c.noise.n_draws) + " E x " +
            std::to_string(c.r_factors.size()) + " R = " + std::to_string(c.design_size()) + ", budget " +
            std::to_string(c.sampling.budget) + " (" + to_string(c.sampling.strategy) + ")");
  g_log.info("config_valid", {{"design_size", c.design_size()}, {"budget", c.sampling.budget}});
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"floodsens: DEM ensembles, flood simulation campaigns and Sobol sensitivity maps"};
  app.set_version_flag("--version", std::string("floodsens ") + kToolVersion);
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output on stdout");

  FixtureArgs fx;
  auto* s_fix = app.add_subcommand("gen-fixture", "Write the synthetic urban-valley fixture and a demo config");
  s_fix->add_option("-o,--out", fx.out, "Output directory")->required();
  s_fix->add_option("--size", fx.size, "small (200x200) or medium (500x500)")->capture_default_str();
  s_fix->add_option("--seed", fx.seed, "Building layout seed")->capture_default_str();

  GenDemsArgs gd;
  auto* s_gd = app.add_subcommand("gen-dems", "Build the factorial DEM database");
  s_gd->add_option("-c,--config", gd.config, "Pipeline config")->required();
  s_gd->add_option("-o,--out", gd.out, "Database directory (default: config database)");
  s_gd->add_option("-w,--workers", gd.workers, "Worker threads");
  s_gd->add_flag("--resume", gd.resume, "Keep complete members from an earlier build");

  RunArgs ra;
  auto* s_run = app.add_subcommand("run", "Run the simulation campaign");
  s_run->add_option("-c,--config,--plan", ra.config, "Pipeline config (sampling plan, solver, boundaries)")->required();
  s_run->add_option("-m,--manifest", ra.manifest, "DEM manifest (default: <database>/manifest.jsonl)");
  s_run->add_option("-s,--store", ra.store, "Result store directory");
  s_run->add_option("-w,--workers", ra.workers, "Concurrent runs");
  s_run->add_option("--max-runs", ra.max_runs, "Stop after this many new runs");

  ConvergenceArgs ca;
  auto* s_conv = app.add_subcommand("convergence", "Running-mean convergence traces at probes");
  s_conv->add_option("-c,--config", ca.config, "Pipeline config");
  s_conv->add_option("-s,--store", ca.store, "Result store directory");
  s_conv->add_option("-p,--probes", ca.probes, "Probes CSV (id,x,y,label)");
  s_conv->add_option("-o,--out", ca.out, "Output directory (default: <store>/convergence)");
  s_conv->add_option("--order-seed", ca.order_seed, "Seed of the sample ordering");
  s_conv->add_option("--window", ca.window, "Trailing window (default: 10% of the samples)");
  s_conv->add_option("--tol", ca.tol, "Relative band around the final mean");
  s_conv->add_flag("--svg", ca.svg, "Also write SVG line plots");

  AnalyzeArgs aa;
  auto* s_an = app.add_subcommand("analyze", "Uncertainty and first-order Sobol analysis");
  s_an->add_option("-c,--config", aa.config, "Pipeline config");
  s_an->add_option("-s,--store", aa.store, "Result store directory");
  s_an->add_option("-p,--probes", aa.probes, "Probes CSV (id,x,y,label)");
  s_an->add_option("-o,--out", aa.out, "Output directory");
  s_an->add_option("--cellsize", aa.cellsize, "Analysis cell size in m (default 5)");
  s_an->add_option("--method", aa.method, "average or nearest");
  s_an->add_option("--boot", aa.boot, "Bootstrap replicates (default 10000)");
  s_an->add_option("--boot-n", aa.boot_n, "Bootstrap subsample size (default 1000)");
  s_an->add_option("--min-samples", aa.min_samples, "Minimum runs for the Si maps (default 100)");
  s_an->add_option("--policy", aa.policy, "Levels seen once: strict or pool");
  s_an->add_flag("--exclude-buildings", aa.exclude_buildings, "Mask cells inside building footprints");
  s_an->add_option("-w,--workers", aa.workers, "Worker threads");

  fs::path vconf;
  auto* s_val = app.add_subcommand("validate", "Check a pipeline config and report every problem");
  s_val->add_option("-c,--config", vconf, "Pipeline config")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitInvalid;
  }

  g_log.quiet = quiet;
  auto* sub = app.get_subcommands().front();
  g_log.command = sub->get_name();
  g_log.info("start", {{"version", kToolVersion}});
  try {
    int rc = kExitOk;
    if (sub == s_fix) rc = cmd_gen_fixture(fx);
    else if (sub == s_gd) rc = cmd_gen_dems(gd);
    else if (sub == s_run) rc = cmd_run(ra);
    else if (sub == s_conv) rc = cmd_convergence(ca);
    else if (sub == s_an) rc = cmd_analyze(aa);
    else if (sub == s_val) rc = cmd_validate(vconf);
    g_log.info("exit", {{"code", rc}});
    return rc;
  } catch (const ValidationError& e) {
    g_log.error("validation_failed", {{"message", e.what()}});
    std::cout << "error: " << e.what() << '\n';
    return kExitInvalid;
  } catch (const std::exception& e) {
    g_log.error("runtime_failure", {{"message", e.what()}});
    std::cout << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
