#pragma once

// Two-dimensional shallow water equations on a regular Cartesian grid.
//
// Finite-volume scheme: hydrostatic reconstruction of interface states (well-balanced,
// depth-positive), HLL fluxes with Einfeldt wave speeds, explicit CFL-limited time
// step, semi-implicit Manning friction. Reconstruction is piecewise constant by
// default; a MUSCL/minmod variant with Heun time stepping is available.
//
// Grid conventions follow Raster: cell (row, col) with row 0 northernmost. hu is the
// discharge per unit width along +x (east); hv is the discharge along increasing row
// index (south).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "floodsens/parallel.hpp"
#include "floodsens/raster.hpp"

namespace floodsens::swe {

inline constexpr double kGravity = 9.81;
inline constexpr double kDefaultDryDepth = 1e-6;

class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, std::size_t cell = npos)
      : std::runtime_error(what), cell_(cell) {}
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t cell() const noexcept { return cell_; }

 private:
  std::size_t cell_;
};

/// Conserved variables of one cell, in a frame where `hu` is the interface-normal
/// discharge and `hv` the tangential one.
struct Cell {
  double h = 0.0;
  double hu = 0.0;
  double hv = 0.0;
};

struct Flux {
  double mass = 0.0;
  double normal = 0.0;
  double tangential = 0.0;
};

inline double velocity(double h, double q, double h_dry) noexcept { return h > h_dry ? q / h : 0.0; }

/// Exact flux of the SWE in the interface-normal frame.
inline Flux physical_flux(const Cell& c, double h_dry = kDefaultDryDepth) noexcept {
  if (!(c.h > h_dry)) return {};
  const double u = c.hu / c.h, v = c.hv / c.h;
  return {c.h * u, c.h * u * u + 0.5 * kGravity * c.h * c.h, c.h * u * v};
}

/// HLL approximate Riemann flux with Einfeldt wave-speed bounds. Depths at or below
/// `h_dry` are treated as dry (zero velocity).
inline Flux hll_flux(const Cell& left, const Cell& right, double h_dry = kDefaultDryDepth) noexcept {
  const bool wet_l = left.h > h_dry, wet_r = right.h > h_dry;
  if (!wet_l && !wet_r) return {};
  const double hl = wet_l ? left.h : 0.0, hr = wet_r ? right.h : 0.0;
  const double ul = wet_l ? left.hu / hl : 0.0, ur = wet_r ? right.hu / hr : 0.0;
  const double vl = wet_l ? left.hv / hl : 0.0, vr = wet_r ? right.hv / hr : 0.0;
  const double cl = std::sqrt(kGravity * hl), cr = std::sqrt(kGravity * hr);

  double sl, sr;
  if (!wet_l) {
    sl = ur - 2.0 * cr;
    sr = ur + cr;
  } else if (!wet_r) {
    sl = ul - cl;
    sr = ul + 2.0 * cl;
  } else {
    const double ql = std::sqrt(hl), qr = std::sqrt(hr);
    const double u_roe = (ql * ul + qr * ur) / (ql + qr);
    const double c_roe = std::sqrt(kGravity * (hl + hr) / 2.0);
    sl = std::min(ul - cl, u_roe - c_roe);
    sr = std::max(ur + cr, u_roe + c_roe);
  }

  const Flux fl{hl * ul, hl * ul * ul + 0.5 * kGravity * hl * hl, hl * ul * vl};
  const Flux fr{hr * ur, hr * ur * ur + 0.5 * kGravity * hr * hr, hr * ur * vr};
  if (sl >= 0.0) return fl;
  if (sr <= 0.0) return fr;
  const double inv = 1.0 / (sr - sl);
  const double ss = sl * sr;
  return {(sr * fl.mass - sl * fr.mass + ss * (hr - hl)) * inv,
          (sr * fl.normal - sl * fr.normal + ss * (hr * ur - hl * ul)) * inv,
          (sr * fl.tangential - sl * fr.tangential + ss * (hr * vr - hl * vl)) * inv};
}

struct InterfaceStates {
  Cell left;
  Cell right;
};

/// Hydrostatic reconstruction: both sides are lowered to the higher of the two bed
/// elevations, h* = max(0, h + z - max(z_l, z_r)), keeping the cell velocities.
inline InterfaceStates hydrostatic_reconstruct(const Cell& left, const Cell& right, double z_left,
                                               double z_right,
                                               double h_dry = kDefaultDryDepth) noexcept {
  const double z_star = std::max(z_left, z_right);
  auto lower = [&](const Cell& c, double z) -> Cell {
    if (z == z_star) return c;
    const double h = std::max(0.0, c.h - (z_star - z));
    return {h, h * velocity(c.h, c.hu, h_dry), h * velocity(c.h, c.hv, h_dry)};
  };
  return {lower(left, z_left), lower(right, z_right)};
}

enum class Reconstruction { first_order, muscl };

inline Reconstruction parse_reconstruction(const std::string& s) {
  if (s == "first_order") return Reconstruction::first_order;
  if (s == "muscl") return Reconstruction::muscl;
  throw std::invalid_argument("unknown reconstruction '" + s + "' (expected first_order|muscl)");
}

inline const char* to_string(Reconstruction r) {
  return r == Reconstruction::first_order ? "first_order" : "muscl";
}

struct SolverConfig {
  double manning_n = 0.015;
  double cfl = 0.45;
  double h_dry = kDefaultDryDepth;
  Reconstruction reconstruction = Reconstruction::first_order;
  double t_end = 3600.0;
  double output_interval = 60.0;
  unsigned threads = 1;
  // Steady-state spin-up: stop once the relative volume change over
  // `steady_window` seconds of model time drops below `steady_tol`.
  double steady_window = 60.0;
  double steady_tol = 1e-4;
  double steady_max_time = 7200.0;

  void validate() const {
    if (!(cfl > 0.0 && cfl <= 1.0)) throw std::invalid_argument("cfl must be in (0, 1]");
    if (!(manning_n >= 0.0)) throw std::invalid_argument("manning_n must be >= 0");
    if (!(h_dry > 0.0)) throw std::invalid_argument("h_dry must be > 0");
    if (!(t_end >= 0.0)) throw std::invalid_argument("t_end must be >= 0");
    if (!(output_interval > 0.0)) throw std::invalid_argument("output_interval must be > 0");
    if (!(steady_window > 0.0) || !(steady_tol > 0.0) || !(steady_max_time >= 0.0))
      throw std::invalid_argument("steady-state settings must be positive");
  }
};

enum class EdgeKind { wall, neumann_outflow, inflow_discharge };

inline EdgeKind parse_edge_kind(const std::string& s) {
  if (s == "wall") return EdgeKind::wall;
  if (s == "outflow" || s == "neumann_outflow") return EdgeKind::neumann_outflow;
  if (s == "inflow" || s == "inflow_discharge") return EdgeKind::inflow_discharge;
  throw std::invalid_argument("unknown boundary type '" + s + "' (expected wall|outflow|inflow)");
}

/// Boundary condition of one domain edge. For inflow edges, the optional segment
/// (coordinates along the edge: y for west/east, x for north/south) restricts the
/// inflow to cells whose centres lie inside it; the rest of the edge is a wall.
struct EdgeCondition {
  EdgeKind kind = EdgeKind::wall;
  double segment_lo = -std::numeric_limits<double>::infinity();
  double segment_hi = std::numeric_limits<double>::infinity();
};

struct BoundarySpec {
  EdgeCondition north, south, west, east;

  static BoundarySpec walls() { return {}; }
};

/// Piecewise-linear discharge series, held constant outside its breakpoints.
class Hydrograph {
 public:
  Hydrograph() = default;
  explicit Hydrograph(std::vector<std::pair<double, double>> points) : points_(std::move(points)) {
    if (points_.empty()) throw std::invalid_argument("hydrograph needs at least one breakpoint");
    for (std::size_t i = 0; i < points_.size(); ++i) {
      if (!(points_[i].second >= 0.0)) throw std::invalid_argument("hydrograph discharge must be >= 0");
      if (i && !(points_[i].first > points_[i - 1].first))
        throw std::invalid_argument("hydrograph times must be strictly increasing");
    }
  }
  static Hydrograph constant(double q) { return Hydrograph({{0.0, q}}); }

  double at(double t) const noexcept {
    if (points_.empty()) return 0.0;
    if (t <= points_.front().first) return points_.front().second;
    if (t >= points_.back().first) return points_.back().second;
    auto it = std::upper_bound(points_.begin(), points_.end(), t,
                               [](double v, const auto& p) { return v < p.first; });
    const auto& [t1, q1] = *it;
    const auto& [t0, q0] = *(it - 1);
    return q0 + (q1 - q0) * (t - t0) / (t1 - t0);
  }
  const std::vector<std::pair<double, double>>& points() const noexcept { return points_; }

 private:
  std::vector<std::pair<double, double>> points_;
};

/// Reads a two-column CSV (t_seconds, Q_m3s). A non-numeric first line is a header.
inline Hydrograph read_hydrograph_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open hydrograph '" + path + "'");
  std::vector<std::pair<double, double>> pts;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    const auto comma = line.find(',');
    double t = 0.0, q = 0.0;
    const bool ok = comma != std::string::npos &&
                    detail::parse_double(detail::trim(std::string_view(line).substr(0, comma)), t) &&
                    detail::parse_double(detail::trim(std::string_view(line).substr(comma + 1)), q);
    if (!ok) {
      if (pts.empty() && lineno == 1) continue;  // header
      throw std::runtime_error(path + ": line " + std::to_string(lineno) + ": expected 't,Q'");
    }
    pts.emplace_back(t, q);
  }
  try {
    return Hydrograph(std::move(pts));
  } catch (const std::invalid_argument& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

inline void write_hydrograph_csv(const Hydrograph& h, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write hydrograph '" + path + "'");
  out << "t_seconds,Q_m3s\n";
  for (const auto& [t, q] : h.points()) out << format_value(t) << ',' << format_value(q) << '\n';
}

struct FlowState {
  std::size_t nx = 0, ny = 0;
  std::vector<double> h, hu, hv;

  FlowState() = default;
  FlowState(std::size_t nx_, std::size_t ny_)
      : nx(nx_), ny(ny_), h(nx_ * ny_, 0.0), hu(nx_ * ny_, 0.0), hv(nx_ * ny_, 0.0) {}

  static FlowState dry_like(const Raster& dem) { return FlowState(dem.ncols(), dem.nrows()); }

  std::size_t size() const noexcept { return h.size(); }
  double volume(double cellsize) const noexcept {
    double v = 0.0;
    for (double x : h) v += x;
    return v * cellsize * cellsize;
  }
};

struct StepResult {
  double dt = 0.0;
  /// Net volume that crossed the domain boundary during the step (positive = inflow).
  double boundary_volume = 0.0;
  double inflow_volume = 0.0;
  double outflow_volume = 0.0;
};

/// Solver bound to one DEM and configuration; owns scratch buffers so repeated steps
/// do not allocate.
class Simulation {
 public:
  Simulation(const Raster& dem, SolverConfig config, BoundarySpec bc)
      : config_(std::move(config)), bc_(bc), nx_(dem.ncols()), ny_(dem.nrows()),
        dx_(dem.cellsize()), z_(dem.values()) {
    config_.validate();
    if (dem.has_nodata()) throw SolverError("DEM contains nodata cells inside the active domain");
    for (std::size_t k = 0; k < z_.size(); ++k)
      if (!std::isfinite(z_[k])) throw SolverError("DEM elevation is not finite", k);
    setup_inflow(dem.header());
    const std::size_t nfx = ny_ * (nx_ + 1), nfy = (ny_ + 1) * nx_;
    for (auto* v : {&fx_m_, &fx_n_, &fx_t_, &fx_sl_, &fx_sr_}) v->assign(nfx, 0.0);
    for (auto* v : {&fy_m_, &fy_n_, &fy_t_, &fy_sl_, &fy_sr_}) v->assign(nfy, 0.0);
    for (auto* v : {&u_, &v_, &dh_, &dhu_, &dhv_}) v->assign(nx_ * ny_, 0.0);
    if (config_.reconstruction == Reconstruction::muscl)
      for (auto* v : {&sx_h_, &sx_e_, &sx_u_, &sx_v_, &sy_h_, &sy_e_, &sy_u_, &sy_v_})
        v->assign(nx_ * ny_, 0.0);
  }

  std::size_t nx() const noexcept { return nx_; }
  std::size_t ny() const noexcept { return ny_; }
  double cellsize() const noexcept { return dx_; }
  const SolverConfig& config() const noexcept { return config_; }
  const std::vector<double>& bed() const noexcept { return z_; }
  bool has_inflow() const noexcept { return !inflow_.empty(); }

  /// Advances `state` by one CFL-limited step (at most `dt_max`) with inflow discharge
  /// `inflow_q` (m^3/s, total over all inflow cells).
  StepResult step(FlowState& state, double inflow_q,
                  double dt_max = std::numeric_limits<double>::infinity()) {
    check_shape(state);
    distribute_inflow(state, inflow_q);
    compute_velocities(state);
    double dt = std::min(stable_dt(state), dt_max);
    if (!(dt > 0.0)) throw SolverError("non-positive time step");

    StepResult res;
    res.dt = dt;
    if (config_.reconstruction == Reconstruction::first_order) {
      const Tally tally = residual<false>(state);
      apply(state, state, dt);
      res.boundary_volume = dt * tally.net();
      res.inflow_volume = dt * tally.in;
      res.outflow_volume = dt * tally.out;
    } else {
      // Heun / SSP-RK2: U1 = U + dt L(U); U = (U + U1 + dt L(U1)) / 2.
      stage_ = state;
      const Tally t1 = residual<true>(state);
      apply(stage_, state, dt);
      compute_velocities(stage_);
      const Tally t2 = residual<true>(stage_);
      apply(stage_, stage_, dt);
      for (std::size_t k = 0; k < state.size(); ++k) {
        state.h[k] = 0.5 * (state.h[k] + stage_.h[k]);
        state.hu[k] = 0.5 * (state.hu[k] + stage_.hu[k]);
        state.hv[k] = 0.5 * (state.hv[k] + stage_.hv[k]);
      }
      res.boundary_volume = 0.5 * dt * (t1.net() + t2.net());
      res.inflow_volume = 0.5 * dt * (t1.in + t2.in);
      res.outflow_volume = 0.5 * dt * (t1.out + t2.out);
    }
    apply_friction(state, dt);
    check_finite(state);
    return res;
  }

 private:
  struct Tally {
    double in = 0.0;   // volume rate entering through the boundary
    double out = 0.0;  // volume rate leaving through the boundary
    double net() const noexcept { return in - out; }
  };

  struct Face {
    double h, u, v, z;
  };

  enum class Edge { north, south, west, east };

  void check_shape(const FlowState& s) const {
    if (s.nx != nx_ || s.ny != ny_ || s.h.size() != nx_ * ny_ || s.hu.size() != s.h.size() ||
        s.hv.size() != s.h.size())
      throw SolverError("flow state dimensions do not match the DEM");
  }

  void setup_inflow(const RasterHeader& hdr) {
    auto add_edge = [&](const EdgeCondition& ec, Edge edge) {
      if (ec.kind != EdgeKind::inflow_discharge) return;
      const bool along_y = edge == Edge::west || edge == Edge::east;
      const std::size_t n = along_y ? ny_ : nx_;
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double c = along_y ? hdr.y_center(i) : hdr.x_center(i);
        if (c < ec.segment_lo || c > ec.segment_hi) continue;
        std::size_t cell = 0;
        switch (edge) {
          case Edge::west: cell = i * nx_; break;
          case Edge::east: cell = i * nx_ + nx_ - 1; break;
          case Edge::north: cell = i; break;
          case Edge::south: cell = (ny_ - 1) * nx_ + i; break;
        }
        inflow_.push_back({edge, i, cell, 0.0});
        ++count;
      }
      if (count == 0) throw SolverError("inflow segment does not contain any boundary cell");
    };
    add_edge(bc_.north, Edge::north);
    add_edge(bc_.south, Edge::south);
    add_edge(bc_.west, Edge::west);
    add_edge(bc_.east, Edge::east);
    inflow_index_x_.assign(2 * ny_, -1);
    inflow_index_y_.assign(2 * nx_, -1);
    for (std::size_t k = 0; k < inflow_.size(); ++k) {
      const auto& c = inflow_[k];
      switch (c.edge) {
        case Edge::west: inflow_index_x_[2 * c.along] = static_cast<long>(k); break;
        case Edge::east: inflow_index_x_[2 * c.along + 1] = static_cast<long>(k); break;
        case Edge::north: inflow_index_y_[2 * c.along] = static_cast<long>(k); break;
        case Edge::south: inflow_index_y_[2 * c.along + 1] = static_cast<long>(k); break;
      }
    }
  }

  // Splits Q over inflow cells in proportion to h^(5/3); uniformly when all are dry.
  void distribute_inflow(const FlowState& s, double q_total) {
    if (inflow_.empty()) return;
    if (!(q_total >= 0.0) || !std::isfinite(q_total)) throw SolverError("invalid inflow discharge");
    double wsum = 0.0;
    for (auto& c : inflow_) {
      const double h = s.h[c.cell];
      c.q = h > config_.h_dry ? std::pow(h, 5.0 / 3.0) : 0.0;
      wsum += c.q;
    }
    if (wsum > 0.0) {
      for (auto& c : inflow_) c.q = q_total * c.q / (wsum * dx_);
    } else {
      const double q = q_total / (static_cast<double>(inflow_.size()) * dx_);
      for (auto& c : inflow_) c.q = q;
    }
  }

  // Ghost depth for an inflow cell: the interior depth, raised to critical depth for
  // the imposed unit discharge.
  static double inflow_ghost_depth(double h_in, double q) noexcept {
    const double hc = q > 0.0 ? std::cbrt(q * q / kGravity) : 0.0;
    return std::max(h_in, hc);
  }

  void compute_velocities(const FlowState& s) {
    const double hd = config_.h_dry;
    for (std::size_t k = 0; k < s.size(); ++k) {
      const bool wet = s.h[k] > hd;
      u_[k] = wet ? s.hu[k] / s.h[k] : 0.0;
      v_[k] = wet ? s.hv[k] / s.h[k] : 0.0;
    }
  }

  double stable_dt(const FlowState& s) const {
    double amax_x = 0.0, amax_y = 0.0;
    const double hd = config_.h_dry;
    for (std::size_t k = 0; k < s.size(); ++k) {
      if (!(s.h[k] > hd)) continue;
      const double c = std::sqrt(kGravity * s.h[k]);
      amax_x = std::max(amax_x, std::fabs(u_[k]) + c);
      amax_y = std::max(amax_y, std::fabs(v_[k]) + c);
    }
    for (const auto& c : inflow_) {
      if (!(c.q > 0.0)) continue;
      const double hg = inflow_ghost_depth(s.h[c.cell], c.q);
      const double a = c.q / hg + std::sqrt(kGravity * hg);
      amax_x = std::max(amax_x, a);
      amax_y = std::max(amax_y, a);
    }
    const double amax = std::max(amax_x, amax_y);
    if (!(amax > 0.0)) return std::numeric_limits<double>::infinity();
    return config_.cfl * dx_ / amax;
  }

  static double minmod(double a, double b) noexcept {
    if (a * b <= 0.0) return 0.0;
    return std::fabs(a) < std::fabs(b) ? a : b;
  }

  void compute_slopes(const FlowState& s) {
    parallel_for(ny_, config_.threads, [&](std::size_t r0, std::size_t r1) {
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = 0; c < nx_; ++c) {
          const std::size_t k = r * nx_ + c;
          auto eta = [&](std::size_t m) { return s.h[m] + z_[m]; };
          if (c == 0 || c + 1 == nx_) {
            sx_h_[k] = sx_e_[k] = sx_u_[k] = sx_v_[k] = 0.0;
          } else {
            const std::size_t w = k - 1, e = k + 1;
            sx_h_[k] = minmod(s.h[k] - s.h[w], s.h[e] - s.h[k]);
            sx_e_[k] = minmod(eta(k) - eta(w), eta(e) - eta(k));
            sx_u_[k] = minmod(u_[k] - u_[w], u_[e] - u_[k]);
            sx_v_[k] = minmod(v_[k] - v_[w], v_[e] - v_[k]);
          }
          if (r == 0 || r + 1 == ny_) {
            sy_h_[k] = sy_e_[k] = sy_u_[k] = sy_v_[k] = 0.0;
          } else {
            const std::size_t n = k - nx_, so = k + nx_;
            sy_h_[k] = minmod(s.h[k] - s.h[n], s.h[so] - s.h[k]);
            sy_e_[k] = minmod(eta(k) - eta(n), eta(so) - eta(k));
            sy_u_[k] = minmod(u_[k] - u_[n], u_[so] - u_[k]);
            sy_v_[k] = minmod(v_[k] - v_[n], v_[so] - v_[k]);
          }
        }
      }
    });
  }

  // Face state of cell k on the side `sign` (+1 east/south, -1 west/north) along x or y.
  // Velocities are returned in the global frame (u along x, v along rows).
  template <bool Muscl>
  Face face_x(const FlowState& s, std::size_t k, double sign) const noexcept {
    if constexpr (!Muscl) {
      return {s.h[k], u_[k], v_[k], z_[k]};
    } else {
      const double h = s.h[k] + 0.5 * sign * sx_h_[k];
      const double eta = s.h[k] + z_[k] + 0.5 * sign * sx_e_[k];
      return {h, u_[k] + 0.5 * sign * sx_u_[k], v_[k] + 0.5 * sign * sx_v_[k], eta - h};
    }
  }
  template <bool Muscl>
  Face face_y(const FlowState& s, std::size_t k, double sign) const noexcept {
    if constexpr (!Muscl) {
      return {s.h[k], u_[k], v_[k], z_[k]};
    } else {
      const double h = s.h[k] + 0.5 * sign * sy_h_[k];
      const double eta = s.h[k] + z_[k] + 0.5 * sign * sy_e_[k];
      return {h, u_[k] + 0.5 * sign * sy_u_[k], v_[k] + 0.5 * sign * sy_v_[k], eta - h};
    }
  }

  // Flux through one interface between face states l and r, written in the normal
  // frame (un = normal velocity, ut = tangential). Stores the numerical flux and the
  // hydrostatic pressure corrections of both neighbours.
  void interface_flux(double hl, double unl, double utl, double zl, double hr, double unr,
                      double utr, double zr, double* m, double* n, double* t, double* sl,
                      double* sr) const noexcept {
    if (hl <= 0.0 && hr <= 0.0) {
      *m = *n = *t = *sl = *sr = 0.0;
      return;
    }
    const double z_star = std::max(zl, zr);
    const double hls = std::max(0.0, hl - (z_star - zl));
    const double hrs = std::max(0.0, hr - (z_star - zr));
    const Flux f = hll_flux({hls, hls * unl, hls * utl}, {hrs, hrs * unr, hrs * utr}, config_.h_dry);
    *m = f.mass;
    *n = f.normal;
    *t = f.tangential;
    *sl = 0.5 * kGravity * (hl - hls) * (hl + hls);
    *sr = 0.5 * kGravity * (hr - hrs) * (hr + hrs);
  }

  // Ghost face state across a boundary edge, in the normal frame of that edge. `inward`
  // is +1 when the ghost sits on the low-index side of the interface.
  Face ghost(const Face& in, EdgeKind kind, double inflow_q, double inward, bool normal_is_u) const noexcept {
    const double un = normal_is_u ? in.u : in.v;
    const double ut = normal_is_u ? in.v : in.u;
    Face g{in.h, 0.0, 0.0, in.z};
    double gn = un, gt = ut;
    switch (kind) {
      case EdgeKind::wall: gn = -un; break;
      case EdgeKind::neumann_outflow: break;
      case EdgeKind::inflow_discharge: {
        g.h = inflow_ghost_depth(in.h, inflow_q);
        gn = g.h > 0.0 ? inward * inflow_q / g.h : 0.0;
        gt = 0.0;
        break;
      }
    }
    g.u = normal_is_u ? gn : gt;
    g.v = normal_is_u ? gt : gn;
    return g;
  }

  const EdgeCondition& edge_condition(Edge e) const noexcept {
    switch (e) {
      case Edge::north: return bc_.north;
      case Edge::south: return bc_.south;
      case Edge::west: return bc_.west;
      default: return bc_.east;
    }
  }

  // Computes face fluxes and the spatial residual (dh, dhu, dhv) for state s.
  template <bool Muscl>
  Tally residual(const FlowState& s) {
    if constexpr (Muscl) compute_slopes(s);
    const std::size_t nfx = nx_ + 1;

    // x-interfaces, one row at a time.
    parallel_for(ny_, config_.threads, [&](std::size_t r0, std::size_t r1) {
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t f = 0; f <= nx_; ++f) {
          const std::size_t idx = r * nfx + f;
          Face l, rt;
          long inflow = -1;
          if (f == 0) {
            rt = face_x<Muscl>(s, r * nx_, -1.0);
            inflow = inflow_index_x_[2 * r];
            const auto kind = inflow >= 0 ? EdgeKind::inflow_discharge
                                          : (bc_.west.kind == EdgeKind::inflow_discharge ? EdgeKind::wall
                                                                                         : bc_.west.kind);
            l = ghost(rt, kind, inflow >= 0 ? inflow_[inflow].q : 0.0, 1.0, true);
          } else if (f == nx_) {
            l = face_x<Muscl>(s, r * nx_ + nx_ - 1, 1.0);
            inflow = inflow_index_x_[2 * r + 1];
            const auto kind = inflow >= 0 ? EdgeKind::inflow_discharge
                                          : (bc_.east.kind == EdgeKind::inflow_discharge ? EdgeKind::wall
                                                                                         : bc_.east.kind);
            rt = ghost(l, kind, inflow >= 0 ? inflow_[inflow].q : 0.0, -1.0, true);
          } else {
            l = face_x<Muscl>(s, r * nx_ + f - 1, 1.0);
            rt = face_x<Muscl>(s, r * nx_ + f, -1.0);
          }
          interface_flux(l.h, l.u, l.v, l.z, rt.h, rt.u, rt.v, rt.z, &fx_m_[idx], &fx_n_[idx],
                         &fx_t_[idx], &fx_sl_[idx], &fx_sr_[idx]);
          if (inflow >= 0) fx_m_[idx] = (f == 0 ? 1.0 : -1.0) * inflow_[inflow].q;
        }
      }
    });

    // y-interfaces, one face row at a time (face row r sits above cell row r).
    parallel_for(ny_ + 1, config_.threads, [&](std::size_t r0, std::size_t r1) {
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = 0; c < nx_; ++c) {
          const std::size_t idx = r * nx_ + c;
          Face l, rt;
          long inflow = -1;
          if (r == 0) {
            rt = face_y<Muscl>(s, c, -1.0);
            inflow = inflow_index_y_[2 * c];
            const auto kind = inflow >= 0 ? EdgeKind::inflow_discharge
                                          : (bc_.north.kind == EdgeKind::inflow_discharge ? EdgeKind::wall
                                                                                          : bc_.north.kind);
            l = ghost(rt, kind, inflow >= 0 ? inflow_[inflow].q : 0.0, 1.0, false);
          } else if (r == ny_) {
            l = face_y<Muscl>(s, (ny_ - 1) * nx_ + c, 1.0);
            inflow = inflow_index_y_[2 * c + 1];
            const auto kind = inflow >= 0 ? EdgeKind::inflow_discharge
                                          : (bc_.south.kind == EdgeKind::inflow_discharge ? EdgeKind::wall
                                                                                          : bc_.south.kind);
            rt = ghost(l, kind, inflow >= 0 ? inflow_[inflow].q : 0.0, -1.0, false);
          } else {
            l = face_y<Muscl>(s, (r - 1) * nx_ + c, 1.0);
            rt = face_y<Muscl>(s, r * nx_ + c, -1.0);
          }
          // Normal frame for y: normal velocity is v, tangential is u.
          interface_flux(l.h, l.v, l.u, l.z, rt.h, rt.v, rt.u, rt.z, &fy_m_[idx], &fy_n_[idx],
                         &fy_t_[idx], &fy_sl_[idx], &fy_sr_[idx]);
          if (inflow >= 0) fy_m_[idx] = (r == 0 ? 1.0 : -1.0) * inflow_[inflow].q;
        }
      }
    });

    // Cell residuals.
    const double inv = 1.0 / dx_;
    parallel_for(ny_, config_.threads, [&](std::size_t r0, std::size_t r1) {
      for (std::size_t r = r0; r < r1; ++r) {
        for (std::size_t c = 0; c < nx_; ++c) {
          const std::size_t k = r * nx_ + c;
          const std::size_t w = r * nfx + c, e = w + 1;  // x-faces west/east of cell
          const std::size_t n = r * nx_ + c, so = n + nx_;  // y-faces north/south of cell
          double dh = -(fx_m_[e] - fx_m_[w]) - (fy_m_[so] - fy_m_[n]);
          double dhu = -((fx_n_[e] + fx_sl_[e]) - (fx_n_[w] + fx_sr_[w])) - (fy_t_[so] - fy_t_[n]);
          double dhv = -(fx_t_[e] - fx_t_[w]) - ((fy_n_[so] + fy_sl_[so]) - (fy_n_[n] + fy_sr_[n]));
          if constexpr (Muscl) {
            // Centred bed-slope term balancing the pressure difference across the cell.
            const Face xw = face_x<true>(s, k, -1.0), xe = face_x<true>(s, k, 1.0);
            const Face yn = face_y<true>(s, k, -1.0), ys = face_y<true>(s, k, 1.0);
            dhu -= 0.5 * kGravity * (xw.h + xe.h) * (xe.z - xw.z);
            dhv -= 0.5 * kGravity * (yn.h + ys.h) * (ys.z - yn.z);
          }
          dh_[k] = dh * inv;
          dhu_[k] = dhu * inv;
          dhv_[k] = dhv * inv;
        }
      }
    });

    // Boundary budget, summed in a fixed order.
    Tally tally;
    auto add = [&](double rate) {
      if (rate >= 0.0)
        tally.in += rate;
      else
        tally.out -= rate;
    };
    for (std::size_t r = 0; r < ny_; ++r) {
      add(fx_m_[r * nfx] * dx_);
      add(-fx_m_[r * nfx + nx_] * dx_);
    }
    for (std::size_t c = 0; c < nx_; ++c) {
      add(fy_m_[c] * dx_);
      add(-fy_m_[ny_ * nx_ + c] * dx_);
    }
    return tally;
  }

  // dst = base + dt * residual (dst may alias base). Restores exact zeros for
  // round-off-level negative depths; a real positivity failure is an error.
  void apply(FlowState& dst, const FlowState& base, double dt) {
    for (std::size_t k = 0; k < dst.size(); ++k) {
      double h = base.h[k] + dt * dh_[k];
      if (h < 0.0) {
        const double scale = std::max({base.h[k], std::fabs(dt * dh_[k]), 1e-300});
        if (h < -1e-10 * scale) throw SolverError("negative water depth (positivity lost)", k);
        h = 0.0;
      }
      dst.h[k] = h;
      dst.hu[k] = base.hu[k] + dt * dhu_[k];
      dst.hv[k] = base.hv[k] + dt * dhv_[k];
    }
  }

  void apply_friction(FlowState& s, double dt) const noexcept {
    const double hd = config_.h_dry;
    const double gn2 = kGravity * config_.manning_n * config_.manning_n;
    for (std::size_t k = 0; k < s.size(); ++k) {
      const double h = s.h[k];
      if (!(h > hd)) {
        s.hu[k] = 0.0;
        s.hv[k] = 0.0;
        continue;
      }
      if (gn2 == 0.0) continue;
      const double speed = std::sqrt(s.hu[k] * s.hu[k] + s.hv[k] * s.hv[k]) / h;
      const double denom = 1.0 + dt * gn2 * speed / std::pow(h, 4.0 / 3.0);
      s.hu[k] /= denom;
      s.hv[k] /= denom;
    }
  }

  static void check_finite(const FlowState& s) {
    for (std::size_t k = 0; k < s.size(); ++k)
      if (!std::isfinite(s.h[k]) || !std::isfinite(s.hu[k]) || !std::isfinite(s.hv[k]))
        throw SolverError("non-finite value in flow state at cell " + std::to_string(k), k);
  }

  struct InflowCell {
    Edge edge;
    std::size_t along;
    std::size_t cell;
    double q;  // unit discharge (m^2/s) for the current step
  };

  SolverConfig config_;
  BoundarySpec bc_;
  std::size_t nx_, ny_;
  double dx_;
  std::vector<double> z_;
  std::vector<InflowCell> inflow_;
  std::vector<long> inflow_index_x_, inflow_index_y_;
  std::vector<double> fx_m_, fx_n_, fx_t_, fx_sl_, fx_sr_;
  std::vector<double> fy_m_, fy_n_, fy_t_, fy_sl_, fy_sr_;
  std::vector<double> u_, v_, dh_, dhu_, dhv_;
  std::vector<double> sx_h_, sx_e_, sx_u_, sx_v_, sy_h_, sy_e_, sy_u_, sy_v_;
  FlowState stage_;
};

/// One step with inflow Q = hydrograph(t). Convenience wrapper; loops should keep a
/// Simulation alive instead.
inline std::pair<FlowState, double> step(FlowState state, const Raster& dem, const SolverConfig& config,
                                         const BoundarySpec& bc, double t,
                                         const Hydrograph& hydrograph = Hydrograph::constant(0.0)) {
  Simulation sim(dem, config, bc);
  auto res = sim.step(state, hydrograph.at(t));
  return {std::move(state), res.dt};
}

enum class InitialCondition { dry, steady_from_constant_q };

inline InitialCondition parse_initial_condition(const std::string& s) {
  if (s == "dry") return InitialCondition::dry;
  if (s == "steady" || s == "steady_from_constant_Q" || s == "steady_from_constant_q")
    return InitialCondition::steady_from_constant_q;
  throw std::invalid_argument("unknown initial condition '" + s + "' (expected dry|steady)");
}

struct RunSummary {
  std::size_t steps = 0;
  double dt_min = 0.0, dt_max = 0.0, dt_mean = 0.0;
  double initial_volume = 0.0;
  double final_volume = 0.0;
  double inflow_volume = 0.0;
  double outflow_volume = 0.0;
  /// (final - initial - net boundary volume) / max(final, initial, inflow).
  double mass_balance_error = 0.0;
  double spinup_time = 0.0;
  std::size_t spinup_steps = 0;
  bool spinup_converged = true;
  double wall_seconds = 0.0;
};

struct RunResult {
  Raster max_depth;
  RunSummary summary;
  FlowState final_state;
};

struct Progress {
  double t;
  double t_end;
  std::size_t steps;
  double volume;
};

/// Spin-up under constant inflow q until the relative volume change over
/// config.steady_window drops below config.steady_tol (or steady_max_time elapses).
inline void spin_up(Simulation& sim, FlowState& state, double q, RunSummary& summary) {
  const auto& cfg = sim.config();
  if (!(q > 0.0) && state.volume(sim.cellsize()) == 0.0) return;
  double t = 0.0, window_start_volume = state.volume(sim.cellsize()), next_check = cfg.steady_window;
  summary.spinup_converged = false;
  while (t < cfg.steady_max_time) {
    const double limit = std::min(next_check, cfg.steady_max_time) - t;
    auto res = sim.step(state, q, limit);
    t += res.dt;
    ++summary.spinup_steps;
    if (t >= next_check - 1e-9 * cfg.steady_window) {
      const double v = state.volume(sim.cellsize());
      const double ref = std::max(v, window_start_volume);
      if (ref > 0.0 && std::fabs(v - window_start_volume) / ref < cfg.steady_tol) {
        summary.spinup_converged = true;
        break;
      }
      window_start_volume = v;
      next_check += cfg.steady_window;
    }
  }
  summary.spinup_time = t;
}

/// Integrates one flood event and returns the per-cell maximum water depth.
inline RunResult run_simulation(const Raster& dem, const SolverConfig& config, const BoundarySpec& bc,
                                const Hydrograph& hydrograph,
                                InitialCondition initial = InitialCondition::dry,
                                const std::function<void(const Progress&)>& progress = {}) {
  const auto wall_start = std::chrono::steady_clock::now();
  Simulation sim(dem, config, bc);
  RunResult out;
  RunSummary& sum = out.summary;
  FlowState state = FlowState::dry_like(dem);
  if (initial == InitialCondition::steady_from_constant_q && sim.has_inflow())
    spin_up(sim, state, hydrograph.at(0.0), sum);

  const double cs = dem.cellsize();
  out.max_depth = Raster(dem.header(), 0.0);
  auto& ymax = out.max_depth.values();
  for (std::size_t k = 0; k < state.size(); ++k) ymax[k] = state.h[k];

  sum.initial_volume = state.volume(cs);
  sum.dt_min = std::numeric_limits<double>::infinity();
  double t = 0.0, dt_sum = 0.0, next_report = config.output_interval;
  const double t_end = config.t_end;
  while (t_end - t > 1e-12 * std::max(1.0, t_end)) {
    auto res = sim.step(state, hydrograph.at(t), t_end - t);
    t += res.dt;
    ++sum.steps;
    dt_sum += res.dt;
    sum.dt_min = std::min(sum.dt_min, res.dt);
    sum.dt_max = std::max(sum.dt_max, res.dt);
    sum.inflow_volume += res.inflow_volume;
    sum.outflow_volume += res.outflow_volume;
    for (std::size_t k = 0; k < state.size(); ++k) ymax[k] = std::max(ymax[k], state.h[k]);
    if (progress && t >= next_report) {
      progress({t, t_end, sum.steps, state.volume(cs)});
      while (next_report <= t) next_report += config.output_interval;
    }
  }
  if (sum.steps == 0) sum.dt_min = 0.0;
  sum.dt_mean = sum.steps ? dt_sum / static_cast<double>(sum.steps) : 0.0;
  sum.final_volume = state.volume(cs);
  const double ref = std::max({sum.final_volume, sum.initial_volume, sum.inflow_volume, 1e-300});
  sum.mass_balance_error =
      (sum.final_volume - sum.initial_volume - (sum.inflow_volume - sum.outflow_volume)) / ref;
  sum.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  out.final_state = std::move(state);
  return out;
}

}  // namespace floodsens::swe
