#pragma once

// Regular-grid rasters and the ESRI-ASCII-style text format shared by DEMs,
// depth maps and sensitivity maps.
//
// Value formatting: a value is written with six fixed decimals ("%.6f") when
// that text parses back to exactly the same double; otherwise the shortest
// decimal that round-trips is written. Reading what was written therefore
// reproduces every bit of the raster.

#include <algorithm>
#include <array>
#include <charconv>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace floodsens {

inline constexpr double kDefaultNodata = -9999.0;

class RasterError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Parse failure, tagged with the 1-based line where it happened.
class RasterFormatError : public RasterError {
 public:
  RasterFormatError(std::size_t line, const std::string& what)
      : RasterError("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

struct RasterHeader {
  std::size_t ncols = 1;
  std::size_t nrows = 1;
  double xll = 0.0;
  double yll = 0.0;
  double cellsize = 1.0;
  double nodata = kDefaultNodata;

  std::size_t size() const noexcept { return ncols * nrows; }
  double width() const noexcept { return static_cast<double>(ncols) * cellsize; }
  double height() const noexcept { return static_cast<double>(nrows) * cellsize; }
  double ytop() const noexcept { return yll + height(); }
  double xright() const noexcept { return xll + width(); }

  // Cell centres; row 0 is the northernmost row.
  double x_center(std::size_t col) const noexcept {
    return xll + (static_cast<double>(col) + 0.5) * cellsize;
  }
  double y_center(std::size_t row) const noexcept {
    return ytop() - (static_cast<double>(row) + 0.5) * cellsize;
  }

  void validate() const {
    if (ncols < 1 || nrows < 1) throw RasterError("raster must have at least one row and column");
    if (!(cellsize > 0.0) || !std::isfinite(cellsize)) throw RasterError("cellsize must be > 0");
    if (!std::isfinite(xll) || !std::isfinite(yll)) throw RasterError("corner coordinates must be finite");
  }

  friend bool operator==(const RasterHeader&, const RasterHeader&) = default;
};

class Raster {
 public:
  Raster() = default;
  explicit Raster(const RasterHeader& header, double fill = 0.0)
      : header_(header), values_(header.size(), fill) {
    header_.validate();
  }
  Raster(const RasterHeader& header, std::vector<double> values)
      : header_(header), values_(std::move(values)) {
    header_.validate();
    if (values_.size() != header_.size())
      throw RasterError("value count " + std::to_string(values_.size()) + " does not match " +
                        std::to_string(header_.ncols) + "x" + std::to_string(header_.nrows));
  }

  const RasterHeader& header() const noexcept { return header_; }
  std::size_t ncols() const noexcept { return header_.ncols; }
  std::size_t nrows() const noexcept { return header_.nrows; }
  std::size_t size() const noexcept { return values_.size(); }
  double cellsize() const noexcept { return header_.cellsize; }
  double nodata() const noexcept { return header_.nodata; }

  double& operator()(std::size_t row, std::size_t col) { return values_[row * header_.ncols + col]; }
  double operator()(std::size_t row, std::size_t col) const {
    return values_[row * header_.ncols + col];
  }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  const std::vector<double>& values() const noexcept { return values_; }
  std::vector<double>& values() noexcept { return values_; }

  bool is_nodata(std::size_t i) const noexcept { return values_[i] == header_.nodata; }
  bool has_nodata() const noexcept {
    return std::any_of(values_.begin(), values_.end(),
                       [&](double v) { return v == header_.nodata; });
  }

  // Bitwise comparison (NaN-free rasters compare with ==).
  friend bool operator==(const Raster& a, const Raster& b) {
    return a.header_ == b.header_ && a.values_ == b.values_;
  }

 private:
  RasterHeader header_;
  std::vector<double> values_;
};

namespace detail {

inline bool parse_double(std::string_view token, double& out) {
  if (token.empty()) return false;
  const char* first = token.data();
  if (*first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, token.data() + token.size(), out);
  return ec == std::errc() && ptr == token.data() + token.size();
}

inline bool parse_size(std::string_view token, std::size_t& out) {
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), out);
  return ec == std::errc() && ptr == token.data() + token.size();
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

}  // namespace detail

/// Deterministic text form of a value (see file comment).
inline std::string format_value(double v) {
  char buf[64];
  if (std::isfinite(v) && std::fabs(v) < 1e15) {
    int n = std::snprintf(buf, sizeof buf, "%.6f", v);
    double back = 0.0;
    if (detail::parse_double(std::string_view(buf, static_cast<std::size_t>(n)), back) && back == v &&
        !(v == 0.0 && std::signbit(v)))
      return std::string(buf, static_cast<std::size_t>(n));
  }
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw RasterError("cannot format value");
  return std::string(buf, ptr);
}

inline Raster parse_raster(std::istream& in) {
  static constexpr std::array<std::string_view, 6> kKeys = {
      "ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value"};
  RasterHeader h;
  std::string line;
  std::size_t lineno = 0;
  for (std::size_t k = 0; k < kKeys.size(); ++k) {
    if (!std::getline(in, line)) throw RasterFormatError(lineno + 1, "truncated header");
    ++lineno;
    std::istringstream ls(line);
    std::string key, value, extra;
    if (!(ls >> key >> value) || (ls >> extra))
      throw RasterFormatError(lineno, "malformed header line, expected '<key> <value>'");
    if (detail::lower(key) != kKeys[k])
      throw RasterFormatError(lineno, "malformed header: expected key '" + std::string(kKeys[k]) +
                                          "', found '" + key + "'");
    bool ok = true;
    switch (k) {
      case 0: ok = detail::parse_size(value, h.ncols); break;
      case 1: ok = detail::parse_size(value, h.nrows); break;
      case 2: ok = detail::parse_double(value, h.xll); break;
      case 3: ok = detail::parse_double(value, h.yll); break;
      case 4: ok = detail::parse_double(value, h.cellsize); break;
      case 5: ok = detail::parse_double(value, h.nodata); break;
    }
    if (!ok) throw RasterFormatError(lineno, "malformed header: bad value '" + value + "' for " + key);
  }
  try {
    h.validate();
  } catch (const RasterError& e) {
    throw RasterFormatError(lineno, std::string("malformed header: ") + e.what());
  }

  std::vector<double> values;
  values.reserve(h.size());
  std::size_t last_value_line = lineno;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t pos = 0;
    while (pos < line.size()) {
      while (pos < line.size() && std::isspace(static_cast<unsigned char>(line[pos]))) ++pos;
      if (pos >= line.size()) break;
      std::size_t end = pos;
      while (end < line.size() && !std::isspace(static_cast<unsigned char>(line[end]))) ++end;
      std::string_view tok(line.data() + pos, end - pos);
      double v = 0.0;
      if (!detail::parse_double(tok, v))
        throw RasterFormatError(lineno, "non-numeric token '" + std::string(tok) + "'");
      if (values.size() == h.size())
        throw RasterFormatError(lineno, "value count mismatch: more than " +
                                            std::to_string(h.size()) + " values");
      values.push_back(v);
      last_value_line = lineno;
      pos = end;
    }
  }
  if (values.size() != h.size())
    throw RasterFormatError(last_value_line, "value count mismatch: expected " +
                                                 std::to_string(h.size()) + ", found " +
                                                 std::to_string(values.size()));
  return Raster(h, std::move(values));
}

inline Raster read_raster(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw RasterError("cannot open raster '" + path.string() + "'");
  try {
    return parse_raster(in);
  } catch (const RasterFormatError& e) {
    throw RasterFormatError(e.line(), path.string() + ": " + e.what());
  }
}

inline void format_raster(const Raster& r, std::ostream& out) {
  const auto& h = r.header();
  out << "ncols " << h.ncols << '\n'
      << "nrows " << h.nrows << '\n'
      << "xllcorner " << format_value(h.xll) << '\n'
      << "yllcorner " << format_value(h.yll) << '\n'
      << "cellsize " << format_value(h.cellsize) << '\n'
      << "NODATA_value " << format_value(h.nodata) << '\n';
  const std::string nodata_token = format_value(h.nodata);
  std::string row;
  for (std::size_t i = 0; i < h.nrows; ++i) {
    row.clear();
    for (std::size_t j = 0; j < h.ncols; ++j) {
      if (j) row += ' ';
      double v = r(i, j);
      row += v == h.nodata ? nodata_token : format_value(v);
    }
    row += '\n';
    out << row;
  }
}

/// Writes through a temporary file and renames, so readers never see a partial raster.
inline void write_raster(const Raster& r, const std::filesystem::path& path) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RasterError("cannot open '" + tmp.string() + "' for writing");
    format_raster(r, out);
    out.flush();
    if (!out) throw RasterError("I/O failure writing '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw RasterError("cannot rename '" + tmp.string() + "': " + ec.message());
}

enum class ResampleMethod { average, nearest };

inline ResampleMethod parse_resample_method(std::string_view s) {
  if (s == "average") return ResampleMethod::average;
  if (s == "nearest") return ResampleMethod::nearest;
  throw std::invalid_argument("unknown resample method '" + std::string(s) + "'");
}

inline const char* to_string(ResampleMethod m) {
  return m == ResampleMethod::average ? "average" : "nearest";
}

/// Header of the grid obtained by aggregating `factor`x`factor` blocks. Extents that are
/// not multiples of `factor` lose their high-index rows/columns (south and east edges);
/// the north-west corner is kept.
inline RasterHeader coarsened_header(const RasterHeader& in, std::size_t factor) {
  if (factor == 0) throw std::invalid_argument("resample factor must be >= 1");
  RasterHeader out = in;
  out.ncols = in.ncols / factor;
  out.nrows = in.nrows / factor;
  if (out.ncols == 0 || out.nrows == 0)
    throw std::invalid_argument("resample factor larger than raster extent");
  out.cellsize = in.cellsize * static_cast<double>(factor);
  // Keep the NW corner: drop the trimmed southern rows from yll.
  out.yll = in.ytop() - static_cast<double>(out.nrows) * out.cellsize;
  return out;
}

/// Block resampling by an integer factor. `average` takes the arithmetic mean of each
/// block (any nodata member makes the coarse cell nodata); `nearest` takes the fine cell
/// holding the block centre (lower index on ties).
inline Raster resample(const Raster& r, std::size_t factor,
                       ResampleMethod method = ResampleMethod::average) {
  if (factor == 0) throw std::invalid_argument("resample factor must be >= 1");
  if (factor == 1) return r;
  const RasterHeader oh = coarsened_header(r.header(), factor);
  Raster out(oh);
  const double nd = r.nodata();
  const double inv = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t i = 0; i < oh.nrows; ++i) {
    for (std::size_t j = 0; j < oh.ncols; ++j) {
      if (method == ResampleMethod::nearest) {
        out(i, j) = r(i * factor + (factor - 1) / 2, j * factor + (factor - 1) / 2);
        continue;
      }
      double sum = 0.0;
      bool hole = false;
      for (std::size_t a = 0; a < factor && !hole; ++a) {
        for (std::size_t b = 0; b < factor; ++b) {
          double v = r(i * factor + a, j * factor + b);
          if (v == nd) {
            hole = true;
            break;
          }
          sum += v;
        }
      }
      out(i, j) = hole ? nd : sum * inv;
    }
  }
  return out;
}

inline Raster resample_average(const Raster& r, long long factor) {
  if (factor <= 0) throw std::invalid_argument("resample factor must be >= 1");
  return resample(r, static_cast<std::size_t>(factor), ResampleMethod::average);
}

struct CellIndex {
  std::size_t row;
  std::size_t col;
};

/// Cell containing (x, y). A point on a shared cell edge belongs to the cell with
/// the lower row/column index.
inline CellIndex locate(const RasterHeader& h, double x, double y) {
  const double u = (x - h.xll) / h.cellsize;
  const double v = (h.ytop() - y) / h.cellsize;
  const double nc = static_cast<double>(h.ncols), nr = static_cast<double>(h.nrows);
  if (!(u >= 0.0 && u <= nc && v >= 0.0 && v <= nr))
    throw std::out_of_range("point (" + format_value(x) + ", " + format_value(y) +
                            ") outside raster bounds");
  auto index = [](double t) {
    double f = std::floor(t);
    if (f == t && t > 0.0) f -= 1.0;
    return static_cast<std::size_t>(f);
  };
  return {std::min(index(v), h.nrows - 1), std::min(index(u), h.ncols - 1)};
}

inline bool contains(const RasterHeader& h, double x, double y) {
  return x >= h.xll && x <= h.xright() && y >= h.yll && y <= h.ytop();
}

inline double sample_at(const Raster& r, double x, double y) {
  auto c = locate(r.header(), x, y);
  return r(c.row, c.col);
}

/// Maps `src` onto the grid `target`. `average` is the area-weighted mean of the
/// overlapping source cells (an exact block mean when the grids nest); `nearest` takes
/// the source cell containing each target cell centre. Target cells not fully covered
/// by source data, or touching a nodata source cell under `average`, become nodata.
inline Raster regrid(const Raster& src, const RasterHeader& target, ResampleMethod method) {
  const auto& sh = src.header();
  Raster out(target, target.nodata);
  const double eps = 1e-9 * std::min(sh.cellsize, target.cellsize);
  if (sh.cellsize == target.cellsize) {
    // Same cell size on a shifted-by-whole-cells grid: values pass through untouched.
    const double col_off = (target.xll - sh.xll) / sh.cellsize;
    const double row_off = (sh.ytop() - target.ytop()) / sh.cellsize;
    if (std::fabs(col_off - std::round(col_off)) < 1e-9 && std::fabs(row_off - std::round(row_off)) < 1e-9) {
      const long c0 = std::lround(col_off), r0 = std::lround(row_off);
      for (std::size_t i = 0; i < target.nrows; ++i) {
        const long r = r0 + static_cast<long>(i);
        if (r < 0 || r >= static_cast<long>(sh.nrows)) continue;
        for (std::size_t j = 0; j < target.ncols; ++j) {
          const long c = c0 + static_cast<long>(j);
          if (c < 0 || c >= static_cast<long>(sh.ncols)) continue;
          const double v = src(static_cast<std::size_t>(r), static_cast<std::size_t>(c));
          out(i, j) = v == sh.nodata ? target.nodata : v;
        }
      }
      return out;
    }
  }
  for (std::size_t i = 0; i < target.nrows; ++i) {
    const double ytop = target.ytop() - static_cast<double>(i) * target.cellsize;
    const double ybot = ytop - target.cellsize;
    for (std::size_t j = 0; j < target.ncols; ++j) {
      const double xl = target.xll + static_cast<double>(j) * target.cellsize;
      const double xr = xl + target.cellsize;
      if (xl < sh.xll - eps || xr > sh.xright() + eps || ybot < sh.yll - eps || ytop > sh.ytop() + eps)
        continue;
      if (method == ResampleMethod::nearest) {
        double v = sample_at(src, target.x_center(j), target.y_center(i));
        out(i, j) = v == sh.nodata ? target.nodata : v;
        continue;
      }
      // Overlapping source index ranges.
      auto col_lo = static_cast<std::size_t>(std::max(0.0, std::floor((xl - sh.xll) / sh.cellsize + 1e-9)));
      auto col_hi = std::min(sh.ncols, static_cast<std::size_t>(std::ceil((xr - sh.xll) / sh.cellsize - 1e-9)));
      auto row_lo = static_cast<std::size_t>(std::max(0.0, std::floor((sh.ytop() - ytop) / sh.cellsize + 1e-9)));
      auto row_hi = std::min(sh.nrows, static_cast<std::size_t>(std::ceil((sh.ytop() - ybot) / sh.cellsize - 1e-9)));
      double acc = 0.0, area = 0.0;
      bool hole = false;
      for (std::size_t a = row_lo; a < row_hi && !hole; ++a) {
        const double ct = sh.ytop() - static_cast<double>(a) * sh.cellsize;
        const double wy = std::min(ct, ytop) - std::max(ct - sh.cellsize, ybot);
        if (wy <= 0.0) continue;
        for (std::size_t b = col_lo; b < col_hi; ++b) {
          const double cl = sh.xll + static_cast<double>(b) * sh.cellsize;
          const double wx = std::min(cl + sh.cellsize, xr) - std::max(cl, xl);
          if (wx <= 0.0) continue;
          const double v = src(a, b);
          if (v == sh.nodata) {
            hole = true;
            break;
          }
          acc += wx * wy * v;
          area += wx * wy;
        }
      }
      if (!hole && area > 0.0) out(i, j) = acc / area;
    }
  }
  return out;
}

}  // namespace floodsens
