#pragma once

// Uncertainty analysis and first-order Sobol indices for the discrete (S, R, E) design.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "floodsens/campaign.hpp"
#include "floodsens/parallel.hpp"
#include "floodsens/raster.hpp"
#include "floodsens/rng.hpp"

namespace floodsens {

enum class Factor { S = 0, R = 1, E = 2 };
inline constexpr std::array<Factor, 3> kFactors = {Factor::S, Factor::R, Factor::E};

inline const char* to_string(Factor f) {
  switch (f) {
    case Factor::S: return "S";
    case Factor::R: return "R";
    default: return "E";
  }
}

inline int level_of(const DemSpec& s, Factor f) noexcept {
  switch (f) {
    case Factor::S: return s.s_level;
    case Factor::R: return s.r_factor;
    default: return s.e_draw;
  }
}

/// Argmax raster codes.
inline constexpr double kArgmaxCode[3] = {1.0, 2.0, 3.0};

// ---------------------------------------------------------------------------
// Alignment onto the analysis grid

struct AlignedOutputs {
  RasterHeader header;
  ResampleMethod method = ResampleMethod::average;
  std::vector<DemSpec> specs;
  std::vector<Raster> samples;

  std::size_t size() const noexcept { return specs.size(); }
};

/// Common analysis grid: shared NW corner, extent = largest whole number of analysis
/// cells inside every input. Inputs whose NW corners differ are an extent mismatch.
inline RasterHeader analysis_grid(const std::vector<RasterHeader>& inputs, double cellsize, double nodata = kDefaultNodata) {
  if (inputs.empty()) throw std::invalid_argument("no rasters to align");
  if (!(cellsize > 0.0)) throw std::invalid_argument("analysis cellsize must be > 0");
  const double xll = inputs.front().xll, ytop = inputs.front().ytop();
  double width = std::numeric_limits<double>::infinity(), height = width;
  for (const auto& h : inputs) {
    const double tol = 1e-9 * std::max({1.0, std::fabs(xll), std::fabs(ytop)});
    if (std::fabs(h.xll - xll) > tol || std::fabs(h.ytop() - ytop) > tol)
      throw std::invalid_argument("extent mismatch: result rasters do not share a NW corner");
    width = std::min(width, h.width());
    height = std::min(height, h.height());
  }
  RasterHeader out;
  out.ncols = static_cast<std::size_t>(std::floor(width / cellsize + 1e-9));
  out.nrows = static_cast<std::size_t>(std::floor(height / cellsize + 1e-9));
  if (out.ncols == 0 || out.nrows == 0) throw std::invalid_argument("extent mismatch: inputs smaller than one analysis cell");
  out.cellsize = cellsize;
  out.xll = xll;
  out.yll = ytop - static_cast<double>(out.nrows) * cellsize;
  out.nodata = nodata;
  return out;
}

inline AlignedOutputs align_rasters(const std::vector<DemSpec>& specs, const std::vector<Raster>& rasters,
                                    double cellsize, ResampleMethod method, unsigned workers = 1) {
  if (specs.size() != rasters.size()) throw std::invalid_argument("spec and raster counts differ");
  std::vector<RasterHeader> headers;
  for (const auto& r : rasters) headers.push_back(r.header());
  AlignedOutputs out;
  out.header = analysis_grid(headers, cellsize);
  out.method = method;
  out.specs = specs;
  out.samples.resize(rasters.size());
  parallel_for(rasters.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) out.samples[i] = regrid(rasters[i], out.header, method);
  });
  return out;
}

/// Aligns every done record of the store (sorted by spec) onto the analysis grid.
inline AlignedOutputs align_outputs(const ResultStore& store, double cellsize, ResampleMethod method,
                                    unsigned workers = 1) {
  auto records = store.done_records(true);
  if (records.empty()) throw std::invalid_argument("store has no done records");
  std::vector<DemSpec> specs;
  std::vector<Raster> rasters(records.size());
  for (const auto& r : records) specs.push_back(r.spec);
  parallel_for(records.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) rasters[i] = read_raster(store.resolve(records[i]));
  });
  return align_rasters(specs, rasters, cellsize, method, workers);
}

// ---------------------------------------------------------------------------
// Uncertainty analysis

inline constexpr double kDefaultWetDepth = 1e-3;

struct UaSummary {
  Raster mean;
  Raster variance;
  std::size_t n_used = 0;
};

/// Per-cell mean and unbiased variance of Y. Cells never deeper than wet_depth in any
/// sample are nodata.
inline UaSummary ua_stats(const AlignedOutputs& a, double wet_depth = kDefaultWetDepth, unsigned workers = 1) {
  UaSummary out;
  out.n_used = a.size();
  out.mean = Raster(a.header, a.header.nodata);
  out.variance = Raster(a.header, a.header.nodata);
  if (a.size() < 2) return out;
  const double n = static_cast<double>(a.size());
  parallel_for(a.header.size(), workers, [&](std::size_t b, std::size_t e) {
    for (std::size_t k = b; k < e; ++k) {
      bool wet = false, valid = true;
      double sum = 0.0;
      for (const auto& s : a.samples) {
        const double y = s[k];
        if (y == s.nodata()) {
          valid = false;
          break;
        }
        wet = wet || y > wet_depth;
        sum += y;
      }
      if (!valid || !wet) continue;
      const double m = sum / n;
      double ss = 0.0;
      for (const auto& s : a.samples) ss += (s[k] - m) * (s[k] - m);
      out.mean[k] = m;
      out.variance[k] = ss / (n - 1.0);
    }
  });
  return out;
}

struct HistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
};

/// Fixed-width histogram with bins aligned to multiples of the width.
inline std::vector<HistogramBin> histogram(const std::vector<double>& values, double bin_width = 0.05) {
  if (!(bin_width > 0.0)) throw std::invalid_argument("bin width must be > 0");
  std::vector<HistogramBin> out;
  if (values.empty()) return out;
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const auto first = static_cast<long long>(std::floor(*mn / bin_width));
  const auto last = static_cast<long long>(std::floor(*mx / bin_width));
  for (long long b = first; b <= last; ++b)
    out.push_back({static_cast<double>(b) * bin_width, static_cast<double>(b + 1) * bin_width, 0});
  for (double v : values) {
    auto b = static_cast<long long>(std::floor(v / bin_width)) - first;
    b = std::clamp<long long>(b, 0, static_cast<long long>(out.size()) - 1);
    ++out[static_cast<std::size_t>(b)].count;
  }
  return out;
}

/// Hartigan's dip statistic of a sample (sorted internally). The result lies in
/// [1/(2n), 1/4].
inline double dip_statistic(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  if (n == 0) throw std::invalid_argument("dip of an empty sample");
  std::sort(v.begin(), v.end());
  // 1-based views
  std::vector<double> x(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i < n; ++i) x[static_cast<std::size_t>(i) + 1] = v[static_cast<std::size_t>(i)];
  std::vector<int> mn(static_cast<std::size_t>(n) + 1), mj(static_cast<std::size_t>(n) + 1),
      gcm(static_cast<std::size_t>(n) + 2), lcm(static_cast<std::size_t>(n) + 2);
  auto X = [&](int i) { return x[static_cast<std::size_t>(i)]; };
  auto& MN = mn;
  auto& MJ = mj;
  auto at = [](std::vector<int>& a, int i) -> int& { return a[static_cast<std::size_t>(i)]; };

  double dip = 1.0;  // in units of 1/(2n)
  int low = 1, high = n;
  if (n < 2 || X(n) == X(1)) return dip / (2.0 * n);

  // Convex minorant indices.
  at(MN, 1) = 1;
  for (int j = 2; j <= n; ++j) {
    at(MN, j) = j - 1;
    for (;;) {
      const int mnj = at(MN, j), mnmnj = at(MN, mnj);
      if (mnj == 1 || (X(j) - X(mnj)) * (mnj - mnmnj) < (X(mnj) - X(mnmnj)) * (j - mnj)) break;
      at(MN, j) = mnmnj;
    }
  }
  // Concave majorant indices.
  at(MJ, n) = n;
  for (int k = n - 1; k >= 1; --k) {
    at(MJ, k) = k + 1;
    for (;;) {
      const int mjk = at(MJ, k), mjmjk = at(MJ, mjk);
      if (mjk == n || (X(k) - X(mjk)) * (mjk - mjmjk) < (X(mjk) - X(mjmjk)) * (k - mjk)) break;
      at(MJ, k) = mjmjk;
    }
  }

  for (;;) {
    at(gcm, 1) = high;
    int i = 1;
    for (; at(gcm, i) > low; ++i) at(gcm, i + 1) = at(MN, at(gcm, i));
    const int l_gcm = i;
    int ig = l_gcm, ix = ig - 1;

    at(lcm, 1) = low;
    for (i = 1; at(lcm, i) < high; ++i) at(lcm, i + 1) = at(MJ, at(lcm, i));
    const int l_lcm = i;
    int ih = l_lcm, iv = 2;

    long double d = 0.0L;
    if (l_gcm != 2 || l_lcm != 2) {
      do {
        const int gcmix = at(gcm, ix), lcmiv = at(lcm, iv);
        if (gcmix > lcmiv) {
          const int gcmi1 = at(gcm, ix + 1);
          const long double dx = (lcmiv - gcmi1 + 1) - (static_cast<long double>(X(lcmiv)) - X(gcmi1)) *
                                                           (gcmix - gcmi1) / (X(gcmix) - X(gcmi1));
          ++iv;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv - 1;
          }
        } else {
          const int lcmiv1 = at(lcm, iv - 1);
          const long double dx = (static_cast<long double>(X(gcmix)) - X(lcmiv1)) * (lcmiv - lcmiv1) /
                                     (X(lcmiv) - X(lcmiv1)) -
                                 (gcmix - lcmiv1 - 1);
          --ix;
          if (dx >= d) {
            d = dx;
            ig = ix + 1;
            ih = iv;
          }
        }
        if (ix < 1) ix = 1;
        if (iv > l_lcm) iv = l_lcm;
      } while (at(gcm, ix) != at(lcm, iv));
    } else {
      d = 1.0L;
    }
    if (d < dip) break;

    double dip_l = 0.0;
    for (int j = ig; j < l_gcm; ++j) {
      double max_t = 1.0;
      const int jb = at(gcm, j + 1), je = at(gcm, j);
      if (je - jb > 1 && X(je) != X(jb)) {
        const double c = (je - jb) / (X(je) - X(jb));
        for (int jj = jb; jj <= je; ++jj) max_t = std::max(max_t, (jj - jb + 1) - (X(jj) - X(jb)) * c);
      }
      dip_l = std::max(dip_l, max_t);
    }
    double dip_u = 0.0;
    for (int j = ih; j < l_lcm; ++j) {
      double max_t = 1.0;
      const int jb = at(lcm, j), je = at(lcm, j + 1);
      if (je - jb > 1 && X(je) != X(jb)) {
        const double c = (je - jb) / (X(je) - X(jb));
        for (int jj = jb; jj <= je; ++jj) max_t = std::max(max_t, (X(jj) - X(jb)) * c - (jj - jb - 1));
      }
      dip_u = std::max(dip_u, max_t);
    }
    dip = std::max({dip, dip_l, dip_u});

    if (low == at(gcm, ig) && high == at(lcm, ih)) break;
    low = at(gcm, ig);
    high = at(lcm, ih);
  }
  return dip / (2.0 * n);
}

/// Type-7 (linear interpolation) quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw std::invalid_argument("quantile of empty data");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * std::clamp(p, 0.0, 1.0);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// Upper (1 - alpha) quantile of the dip under a uniform null of size n, by Monte Carlo.
inline double dip_null_quantile(std::size_t n, double alpha = 0.05, std::size_t n_null = 2000,
                                std::uint64_t seed = 0x6469702d6e756c6cULL) {
  std::vector<double> dips(n_null);
  for (std::size_t b = 0; b < n_null; ++b) {
    SplitMix64 rng(hash_counters(seed, n, b, 0));
    std::vector<double> u(n);
    for (auto& v : u) v = rng.uniform();
    dips[b] = dip_statistic(std::move(u));
  }
  std::sort(dips.begin(), dips.end());
  return quantile_sorted(dips, 1.0 - alpha);
}

struct ModalityResult {
  double dip = 0.0;
  double threshold = 0.0;
  bool bimodal = false;
};

/// Bimodality flag: dip above the 95% quantile of its uniform-null distribution.
inline ModalityResult bimodality(const std::vector<double>& values, double alpha = 0.05, std::size_t n_null = 2000) {
  ModalityResult r;
  if (values.size() < 4) return r;
  r.dip = dip_statistic(values);
  r.threshold = dip_null_quantile(values.size(), alpha, n_null);
  r.bimodal = r.dip > r.threshold;
  return r;
}

// ---------------------------------------------------------------------------
// First-order Sobol indices

struct Sample {
  DemSpec spec;
  double y = 0.0;
};

enum class SiStatus { ok, insufficient, undefined };

inline const char* to_string(SiStatus s) {
  switch (s) {
    case SiStatus::ok: return "ok";
    case SiStatus::insufficient: return "insufficient";
    default: return "undefined";
  }
}

/// strict: any observed level with fewer than 2 samples makes the factor insufficient.
/// pool: such levels are dropped (and counted) and the index is computed on the rest.
enum class LevelPolicy { strict, pool };

struct SobolOptions {
  LevelPolicy policy = LevelPolicy::strict;
  bool bias_correction = false;
};

struct FactorSi {
  double value = std::numeric_limits<double>::quiet_NaN();  // raw, unclamped
  SiStatus status = SiStatus::undefined;
  std::size_t pooled_out = 0;
  std::size_t levels = 0;
};

struct SobolEstimate {
  std::array<FactorSi, 3> factors;
  std::size_t n_used = 0;
  double mean_y = 0.0;
  double var_y = 0.0;  // population variance

  const FactorSi& operator[](Factor f) const { return factors[static_cast<std::size_t>(f)]; }
  bool defined() const noexcept { return factors[0].status != SiStatus::undefined; }
};

namespace detail {

inline bool sample_less(const Sample& a, const Sample& b) {
  if (a.spec != b.spec) return a.spec < b.spec;
  return a.y < b.y;
}

/// Grouping estimator over samples already in canonical order. `idx` selects and
/// orders the samples (repeats allowed).
inline SobolEstimate sobol_indexed(const std::vector<Sample>& data, const std::vector<std::size_t>& idx,
                                   const SobolOptions& opt) {
  SobolEstimate est;
  const std::size_t n = idx.size();
  est.n_used = n;
  if (n < 2) return est;
  double sum = 0.0;
  for (auto i : idx) sum += data[i].y;
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (auto i : idx) ss += (data[i].y - mean) * (data[i].y - mean);
  const double var = ss / static_cast<double>(n);
  est.mean_y = mean;
  est.var_y = var;
  if (!(var > 0.0) || var <= (1e-12 * mean) * (1e-12 * mean)) return est;

  for (Factor f : kFactors) {
    FactorSi& out = est.factors[static_cast<std::size_t>(f)];
    int max_level = 0;
    for (auto i : idx) {
      const int l = level_of(data[i].spec, f);
      if (l < 0) throw std::invalid_argument("negative factor level");
      max_level = std::max(max_level, l);
    }
    const auto nl = static_cast<std::size_t>(max_level) + 1;
    std::vector<double> gsum(nl, 0.0);
    std::vector<std::size_t> gcnt(nl, 0);
    for (auto i : idx) {
      const auto l = static_cast<std::size_t>(level_of(data[i].spec, f));
      gsum[l] += data[i].y;
      ++gcnt[l];
    }
    std::size_t singles = 0, levels = 0;
    for (std::size_t l = 0; l < nl; ++l) {
      if (gcnt[l] == 1) ++singles;
      if (gcnt[l] >= 2) ++levels;
    }
    out.levels = levels;
    out.status = SiStatus::insufficient;
    if (singles > 0 && opt.policy == LevelPolicy::strict) continue;
    if (levels < 2) continue;

    // With pooling, singleton levels leave the sample and the moments are recomputed.
    double m = mean, v = var;
    std::size_t kept = n;
    if (singles > 0) {
      out.pooled_out = singles;
      kept = n - singles;
      double s = 0.0;
      for (auto i : idx)
        if (gcnt[static_cast<std::size_t>(level_of(data[i].spec, f))] >= 2) s += data[i].y;
      m = s / static_cast<double>(kept);
      double q = 0.0;
      for (auto i : idx)
        if (gcnt[static_cast<std::size_t>(level_of(data[i].spec, f))] >= 2) q += (data[i].y - m) * (data[i].y - m);
      v = q / static_cast<double>(kept);
      if (!(v > 0.0) || v <= (1e-12 * m) * (1e-12 * m)) continue;
    }
    const double nk = static_cast<double>(kept);
    double between = 0.0;
    std::vector<double> gmean(nl, 0.0);
    for (std::size_t l = 0; l < nl; ++l) {
      if (gcnt[l] < 2) continue;
      gmean[l] = gsum[l] / static_cast<double>(gcnt[l]);
      between += (static_cast<double>(gcnt[l]) / nk) * (gmean[l] - m) * (gmean[l] - m);
    }
    if (opt.bias_correction) {
      // Expected between-group variance from sampling noise: sum_g (n_g/n) s_g^2 / n_g.
      std::vector<double> within(nl, 0.0);
      for (auto i : idx) {
        const auto l = static_cast<std::size_t>(level_of(data[i].spec, f));
        if (gcnt[l] >= 2) within[l] += (data[i].y - gmean[l]) * (data[i].y - gmean[l]);
      }
      double corr = 0.0;
      for (std::size_t l = 0; l < nl; ++l)
        if (gcnt[l] >= 2) corr += within[l] / static_cast<double>(gcnt[l] - 1) / nk;
      between -= corr;
    }
    out.value = between / v;
    out.status = SiStatus::ok;
  }
  return est;
}

inline std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace detail

/// Plug-in ANOVA estimator of Var[E(Y|Xi)] / Var(Y) for each factor. Samples are put
/// in a canonical order first, so the result does not depend on input order.
inline SobolEstimate sobol_first_order(std::vector<Sample> samples, const SobolOptions& opt = {}) {
  std::sort(samples.begin(), samples.end(), detail::sample_less);
  return detail::sobol_indexed(samples, detail::iota(samples.size()), opt);
}

struct FactorCi {
  double low = std::numeric_limits<double>::quiet_NaN();
  double high = std::numeric_limits<double>::quiet_NaN();
  std::size_t kept = 0;
  std::size_t dropped = 0;
  bool reliable = false;
};

struct BootstrapResult {
  std::array<FactorCi, 3> ci;
  std::size_t n_boot = 0;
  std::size_t n_sub = 0;
  double level = 0.95;

  const FactorCi& operator[](Factor f) const { return ci[static_cast<std::size_t>(f)]; }
};

/// Percentile bootstrap: n_boot resamples of size n_sub drawn with replacement, Si
/// recomputed on each. Replicate b uses its own counter-derived stream, so results do not
/// depend on the worker count. Replicates where a factor is not ok are dropped for that
/// factor; more than half dropped marks the interval unreliable.
inline BootstrapResult bootstrap_ci(std::vector<Sample> samples, std::size_t n_boot, std::size_t n_sub,
                                    double level, std::uint64_t seed, const SobolOptions& opt = {},
                                    unsigned workers = 1) {
  if (n_sub == 0 || n_sub > samples.size()) throw std::invalid_argument("n_sub must be in [1, sample count]");
  if (n_boot == 0) throw std::invalid_argument("n_boot must be >= 1");
  if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("level must be in (0, 1)");
  std::sort(samples.begin(), samples.end(), detail::sample_less);
  std::vector<std::array<double, 3>> reps(n_boot);
  std::vector<std::array<bool, 3>> ok(n_boot);
  parallel_for(n_boot, workers, [&](std::size_t b0, std::size_t b1) {
    std::vector<std::size_t> idx(n_sub);
    for (std::size_t b = b0; b < b1; ++b) {
      SplitMix64 rng(hash_counters(seed, b, n_sub, 0x626f6f74ULL));
      for (auto& i : idx) i = static_cast<std::size_t>(rng.below(samples.size()));
      std::sort(idx.begin(), idx.end());
      const auto est = detail::sobol_indexed(samples, idx, opt);
      for (std::size_t f = 0; f < 3; ++f) {
        ok[b][f] = est.factors[f].status == SiStatus::ok;
        reps[b][f] = est.factors[f].value;
      }
    }
  });
  BootstrapResult out;
  out.n_boot = n_boot;
  out.n_sub = n_sub;
  out.level = level;
  const double a = (1.0 - level) / 2.0;
  for (std::size_t f = 0; f < 3; ++f) {
    std::vector<double> vals;
    for (std::size_t b = 0; b < n_boot; ++b)
      if (ok[b][f]) vals.push_back(reps[b][f]);
    auto& ci = out.ci[f];
    ci.kept = vals.size();
    ci.dropped = n_boot - vals.size();
    ci.reliable = 2 * ci.dropped <= n_boot && !vals.empty();
    if (vals.empty()) continue;
    std::sort(vals.begin(), vals.end());
    ci.low = quantile_sorted(vals, a);
    ci.high = quantile_sorted(vals, 1.0 - a);
  }
  return out;
}

struct SiConvergencePoint {
  std::size_t n = 0;
  SobolEstimate estimate;
};

/// Si on growing prefixes of a seeded random permutation of the samples.
inline std::vector<SiConvergencePoint> si_convergence(const std::vector<Sample>& samples, std::uint64_t seed,
                                                      std::size_t step = 0, const SobolOptions& opt = {}) {
  const std::size_t n = samples.size();
  if (step == 0) step = std::max<std::size_t>(1, n / 50);
  const auto perm = random_permutation(n, seed);
  std::vector<SiConvergencePoint> out;
  std::vector<Sample> prefix;
  prefix.reserve(n);
  std::size_t next = std::min(step, n);
  for (std::size_t i = 0; i < n; ++i) {
    prefix.push_back(samples[perm[i]]);
    if (i + 1 == next || i + 1 == n) {
      if (prefix.size() >= 2) out.push_back({prefix.size(), sobol_first_order(prefix, opt)});
      next += step;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sensitivity maps

struct MapOptions {
  bool exclude_dry = true;
  double wet_depth = kDefaultWetDepth;
  bool exclude_buildings = false;
  std::optional<Raster> building_footprint;  // on the analysis grid; non-nodata cells are buildings
  std::size_t min_samples = 100;
  SobolOptions sobol;
  unsigned workers = 1;
};

/// Building mask on an analysis grid: 1 where at least half the cell (average) or its
/// centre (nearest) lies in the layer footprint, nodata elsewhere.
inline Raster footprint_on_grid(const Raster& layer, const RasterHeader& grid, ResampleMethod method) {
  Raster ind(layer.header(), 0.0);
  for (std::size_t k = 0; k < ind.size(); ++k) ind[k] = layer.is_nodata(k) ? 0.0 : 1.0;
  const Raster r = regrid(ind, grid, method);
  Raster out(grid, grid.nodata);
  for (std::size_t k = 0; k < out.size(); ++k)
    if (!r.is_nodata(k) && r[k] >= 0.5) out[k] = 1.0;
  return out;
}

struct SobolMaps {
  std::array<Raster, 3> si;  // raw values, nodata where not ok
  Raster argmax;             // 1 = S, 2 = R, 3 = E
  std::array<double, 3> area_fraction{};  // share of argmax-defined cells won by each factor
  std::array<std::size_t, 3> insufficient{};
  std::size_t defined_cells = 0;
  std::size_t masked_cells = 0;
  std::array<std::vector<HistogramBin>, 3> histograms;  // of values clamped to [0, 1]
};

/// Factor with the largest index among those that are ok; ties go to the earlier factor.
inline std::optional<Factor> argmax_factor(const SobolEstimate& est) {
  std::optional<Factor> best;
  double v = -std::numeric_limits<double>::infinity();
  for (Factor f : kFactors) {
    const auto& fs = est[f];
    if (fs.status == SiStatus::ok && fs.value > v) {
      v = fs.value;
      best = f;
    }
  }
  return best;
}

inline SobolMaps sobol_maps(const AlignedOutputs& a, const MapOptions& opt = {}) {
  if (a.size() < opt.min_samples)
    throw std::invalid_argument("aligned sample count " + std::to_string(a.size()) + " below minimum " +
                                std::to_string(opt.min_samples));
  if (opt.exclude_buildings) {
    if (!opt.building_footprint) throw std::invalid_argument("exclude_buildings needs a building footprint");
    if (!(opt.building_footprint->header() == a.header))
      throw std::invalid_argument("building footprint is not on the analysis grid");
  }
  const double nodata = a.header.nodata;
  SobolMaps out;
  for (auto& r : out.si) r = Raster(a.header, nodata);
  out.argmax = Raster(a.header, nodata);
  const std::size_t cells = a.header.size();
  std::vector<std::uint8_t> masked(cells, 0), insufficient(cells * 3, 0);

  // Canonical order once; every cell then reuses the same permutation.
  std::vector<std::size_t> order = detail::iota(a.size());
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a.specs[i] < a.specs[j]; });

  parallel_for(cells, opt.workers, [&](std::size_t b, std::size_t e) {
    std::vector<Sample> s(a.size());
    for (std::size_t k = b; k < e; ++k) {
      if (opt.exclude_buildings && !opt.building_footprint->is_nodata(k)) {
        masked[k] = 1;
        continue;
      }
      bool wet = false, valid = true;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const auto& r = a.samples[order[i]];
        const double y = r[k];
        if (y == r.nodata()) valid = false;
        wet = wet || y > opt.wet_depth;
        s[i] = {a.specs[order[i]], y};
      }
      if (!valid || (opt.exclude_dry && !wet)) {
        masked[k] = 1;
        continue;
      }
      // Equal specs keep stable y order so the result matches sobol_first_order.
      std::sort(s.begin(), s.end(), detail::sample_less);
      const auto est = detail::sobol_indexed(s, detail::iota(s.size()), opt.sobol);
      for (std::size_t f = 0; f < 3; ++f) {
        if (est.factors[f].status == SiStatus::ok)
          out.si[f][k] = est.factors[f].value;
        else if (est.factors[f].status == SiStatus::insufficient)
          insufficient[3 * k + f] = 1;
      }
      if (auto best = argmax_factor(est)) out.argmax[k] = kArgmaxCode[static_cast<std::size_t>(*best)];
    }
  });

  std::array<std::size_t, 3> wins{};
  std::array<std::vector<double>, 3> vals;
  for (std::size_t k = 0; k < cells; ++k) {
    out.masked_cells += masked[k];
    for (std::size_t f = 0; f < 3; ++f) {
      out.insufficient[f] += insufficient[3 * k + f];
      if (!out.si[f].is_nodata(k)) vals[f].push_back(std::clamp(out.si[f][k], 0.0, 1.0));
    }
    if (!out.argmax.is_nodata(k)) {
      ++out.defined_cells;
      ++wins[static_cast<std::size_t>(out.argmax[k]) - 1];
    }
  }
  for (std::size_t f = 0; f < 3; ++f) {
    out.area_fraction[f] = out.defined_cells ? static_cast<double>(wins[f]) / static_cast<double>(out.defined_cells) : 0.0;
    out.histograms[f].clear();
    for (int bin = 0; bin < 20; ++bin) out.histograms[f].push_back({bin * 0.05, (bin + 1) * 0.05, 0});
    for (double v : vals[f]) ++out.histograms[f][std::min<std::size_t>(19, static_cast<std::size_t>(v / 0.05))].count;
  }
  return out;
}

/// Samples (spec, Y at cell k) from an aligned set.
inline std::vector<Sample> cell_samples(const AlignedOutputs& a, std::size_t k) {
  std::vector<Sample> out;
  out.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out.push_back({a.specs[i], a.samples[i][k]});
  return out;
}

}  // namespace floodsens
