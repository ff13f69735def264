#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctj/error.hpp"
#include "ctj/geo/geometry.hpp"
#include "ctj/geo/io.hpp"
#include "ctj/geo/types.hpp"

namespace ctj::eval {

using geo::BoundingBox;
using geo::LngLat;
using geo::Trajectory;
using json = nlohmann::json;

inline constexpr double kLn2 = std::numbers::ln2;

struct GridSpec {
  std::size_t rows = 16;
  std::size_t cols = 16;

  std::size_t cells() const { return rows * cols; }
};

/// Occupancy counts over a rows x cols partition of `frame`. Row 0 is the
/// southern edge, column 0 the western edge; points on the north or east
/// boundary fall in the last row or column.
class GridHistogram {
 public:
  GridHistogram(const BoundingBox& frame, GridSpec grid) : frame_(frame), grid_(grid), counts_(grid.cells(), 0) {
    geo::validate(frame);
    require(grid.rows > 0 && grid.cols > 0, "invalid_argument", "grid needs at least one row and column");
  }

  const BoundingBox& frame() const { return frame_; }
  const GridSpec& grid() const { return grid_; }
  const std::vector<std::uint64_t>& counts() const { return counts_; }
  std::uint64_t total() const { return total_; }

  /// Flat index row * cols + col, or nothing outside the frame.
  std::optional<std::size_t> cell_of(const LngLat& p) const {
    if (!frame_.contains(p)) return std::nullopt;
    const auto bucket = [](double v, double lo, double span, std::size_t n) {
      const auto k = static_cast<std::size_t>(std::floor((v - lo) / span * static_cast<double>(n)));
      return std::min(k, n - 1);
    };
    const auto r = bucket(p.lat, frame_.lat_min, frame_.height(), grid_.rows);
    const auto c = bucket(p.lng, frame_.lng_min, frame_.width(), grid_.cols);
    return r * grid_.cols + c;
  }

  /// Counts `p`; returns false (and counts nothing) outside the frame.
  bool add(const LngLat& p) {
    const auto cell = cell_of(p);
    if (!cell) return false;
    ++counts_[*cell];
    ++total_;
    return true;
  }

  std::uint64_t at(std::size_t row, std::size_t col) const { return counts_[row * grid_.cols + col]; }

  std::vector<double> normalized() const {
    require(total_ > 0, "empty_histogram", "histogram has no points inside the frame");
    std::vector<double> p(counts_.size());
    const double n = static_cast<double>(total_);
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<double>(counts_[i]) / n;
    return p;
  }

 private:
  BoundingBox frame_;
  GridSpec grid_;
  std::vector<std::uint64_t> counts_;
  std::uint64_t total_ = 0;
};

namespace detail {

inline void check_distribution(const std::vector<double>& p, const char* name) {
  double sum = 0.0;
  for (double v : p) {
    require(std::isfinite(v) && v >= 0.0, "invalid_argument",
            std::string(name) + " has a negative or non-finite entry");
    sum += v;
  }
  require(std::abs(sum - 1.0) <= 1e-9, "invalid_argument", std::string(name) + " does not sum to 1");
}

inline double kl_to_mixture(double p, double m) { return p > 0.0 ? p * std::log(p / m) : 0.0; }

/// Normalized counts. Integer totals keep the result independent of
/// accumulation order.
inline std::vector<double> normalize_counts(const std::vector<std::uint64_t>& counts, const char* what) {
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  require(total > 0, "empty_histogram", std::string(what) + " has no points inside the frame");
  std::vector<double> p(counts.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
  return p;
}

inline void require_corpus(const std::vector<Trajectory>& c, const char* name) {
  require(!c.empty(), "invalid_argument", std::string(name) + " corpus is empty");
}

}  // namespace detail

/// Jensen-Shannon divergence in nats: 0.5 KL(P||M) + 0.5 KL(Q||M), M = (P+Q)/2.
inline double jsd(const std::vector<double>& p, const std::vector<double>& q) {
  require(p.size() == q.size(), "invalid_argument", "distributions differ in support size");
  require(!p.empty(), "invalid_argument", "empty distribution");
  detail::check_distribution(p, "P");
  detail::check_distribution(q, "Q");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = 0.5 * (p[i] + q[i]);
    s += detail::kl_to_mixture(p[i], m) + detail::kl_to_mixture(q[i], m);
  }
  return std::clamp(0.5 * s, 0.0, kLn2);
}

inline GridHistogram point_histogram(const std::vector<Trajectory>& corpus, const BoundingBox& frame, GridSpec grid) {
  GridHistogram h(frame, grid);
  for (const auto& t : corpus)
    for (const auto& p : t.points) h.add(p.pos());
  return h;
}

/// JSD between the point-occupancy grids of the two corpora.
inline double density_error(const std::vector<Trajectory>& real, const std::vector<Trajectory>& gen,
                            const BoundingBox& frame, GridSpec grid = {}) {
  detail::require_corpus(real, "real");
  detail::require_corpus(gen, "generated");
  return jsd(point_histogram(real, frame, grid).normalized(), point_histogram(gen, frame, grid).normalized());
}

/// Joint (start cell, end cell) counts, flattened start * cells + end. Trips
/// with an endpoint outside the frame are skipped.
inline std::vector<std::uint64_t> od_counts(const std::vector<Trajectory>& corpus, const BoundingBox& frame,
                                            GridSpec grid) {
  const GridHistogram h(frame, grid);
  const std::size_t K = grid.cells();
  std::vector<std::uint64_t> counts(K * K, 0);
  for (const auto& t : corpus) {
    if (t.points.empty()) continue;
    const auto a = h.cell_of(t.front().pos());
    const auto b = h.cell_of(t.back().pos());
    if (a && b) ++counts[*a * K + *b];
  }
  return counts;
}

/// JSD of the joint origin-destination cell distributions.
inline double trip_error(const std::vector<Trajectory>& real, const std::vector<Trajectory>& gen,
                         const BoundingBox& frame, GridSpec grid = {}) {
  detail::require_corpus(real, "real");
  detail::require_corpus(gen, "generated");
  return jsd(detail::normalize_counts(od_counts(real, frame, grid), "real corpus"),
             detail::normalize_counts(od_counts(gen, frame, grid), "generated corpus"));
}

/// Mean of the start-cell and end-cell marginal JSDs.
inline double trip_error_marginal(const std::vector<Trajectory>& real, const std::vector<Trajectory>& gen,
                                  const BoundingBox& frame, GridSpec grid = {}) {
  detail::require_corpus(real, "real");
  detail::require_corpus(gen, "generated");
  const std::size_t K = grid.cells();
  const auto marginals = [&](const std::vector<Trajectory>& c, const char* what) {
    const auto joint = od_counts(c, frame, grid);
    std::vector<std::uint64_t> start(K, 0), end(K, 0);
    for (std::size_t a = 0; a < K; ++a)
      for (std::size_t b = 0; b < K; ++b) {
        start[a] += joint[a * K + b];
        end[b] += joint[a * K + b];
      }
    return std::pair{detail::normalize_counts(start, what), detail::normalize_counts(end, what)};
  };
  const auto [rs, re] = marginals(real, "real corpus");
  const auto [gs, ge] = marginals(gen, "generated corpus");
  return 0.5 * (jsd(rs, gs) + jsd(re, ge));
}

/// Per-trajectory travel distances in meters.
inline std::vector<double> trajectory_lengths(const std::vector<Trajectory>& corpus) {
  std::vector<double> out;
  out.reserve(corpus.size());
  for (const auto& t : corpus) out.push_back(geo::path_length(t));
  return out;
}

/// JSD of travel-distance histograms over `bins` equal bins spanning the
/// pooled [min, max] of both corpora.
inline double length_error(const std::vector<double>& real_lengths, const std::vector<double>& gen_lengths,
                           std::size_t bins = 50) {
  require(!real_lengths.empty() && !gen_lengths.empty(), "invalid_argument", "length corpus is empty");
  require(bins > 0, "invalid_argument", "length_error needs at least one bin");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto* v : {&real_lengths, &gen_lengths})
    for (double x : *v) {
      require(std::isfinite(x) && x >= 0.0, "invalid_argument", "trajectory length must be finite and >= 0");
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  const auto histogram = [&](const std::vector<double>& xs) {
    std::vector<std::uint64_t> c(bins, 0);
    for (double x : xs) {
      std::size_t k = 0;
      if (hi > lo) k = std::min(bins - 1, static_cast<std::size_t>(std::floor((x - lo) / (hi - lo) * bins)));
      ++c[k];
    }
    return detail::normalize_counts(c, "length histogram");
  };
  return jsd(histogram(real_lengths), histogram(gen_lengths));
}

inline double length_error(const std::vector<Trajectory>& real, const std::vector<Trajectory>& gen,
                           std::size_t bins = 50) {
  detail::require_corpus(real, "real");
  detail::require_corpus(gen, "generated");
  return length_error(trajectory_lengths(real), trajectory_lengths(gen), bins);
}

/// Mean point-to-polyline distance in meters, pooled over every point of
/// every trajectory. trajs[i] is paired with routes[i].
inline double route_adherence(const std::vector<Trajectory>& trajs, const std::vector<geo::RoutePolyline>& routes) {
  require(trajs.size() == routes.size(), "invalid_argument", "one route per trajectory required");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    require(!routes[i].vertices.empty(), "route_invalid", "route " + std::to_string(i) + " is empty");
    for (const auto& p : trajs[i].points) {
      sum += geo::point_polyline_distance(p.pos(), routes[i].vertices);
      ++n;
    }
  }
  require(n > 0, "invalid_argument", "no points to measure");
  return sum / static_cast<double>(n);
}

/// Adherence of many trajectories to one shared route.
inline double route_adherence(const std::vector<Trajectory>& trajs, const geo::RoutePolyline& route) {
  return route_adherence(trajs, std::vector<geo::RoutePolyline>(trajs.size(), route));
}

// ---- report -------------------------------------------------------------------

struct EvalOptions {
  GridSpec grid;
  std::size_t length_bins = 50;
  std::uint64_t seed = 0;  // recorded only
};

struct MetricReport {
  double density_error = 0.0;
  double trip_error = 0.0;
  double trip_error_marginal = 0.0;
  double length_error = 0.0;
  std::size_t real_count = 0;
  std::size_t gen_count = 0;
  EvalOptions options;
};

inline MetricReport evaluate(const std::vector<Trajectory>& real, const std::vector<Trajectory>& gen,
                             const BoundingBox& frame, const EvalOptions& opts = {}) {
  MetricReport r;
  r.density_error = density_error(real, gen, frame, opts.grid);
  r.trip_error = trip_error(real, gen, frame, opts.grid);
  r.trip_error_marginal = trip_error_marginal(real, gen, frame, opts.grid);
  r.length_error = length_error(real, gen, opts.length_bins);
  r.real_count = real.size();
  r.gen_count = gen.size();
  r.options = opts;
  return r;
}

inline json to_json(const MetricReport& r) {
  return {{"density_error", r.density_error},
          {"trip_error", r.trip_error},
          {"trip_error_marginal", r.trip_error_marginal},
          {"length_error", r.length_error},
          {"metadata",
           {{"real_count", r.real_count},
            {"gen_count", r.gen_count},
            {"grid", {r.options.grid.rows, r.options.grid.cols}},
            {"length_bins", r.options.length_bins},
            {"seed", r.options.seed},
            {"log_base", "e"}}}};
}

inline MetricReport report_from_json(const json& j) {
  try {
    MetricReport r;
    r.density_error = j.at("density_error").get<double>();
    r.trip_error = j.at("trip_error").get<double>();
    r.trip_error_marginal = j.at("trip_error_marginal").get<double>();
    r.length_error = j.at("length_error").get<double>();
    const auto& m = j.at("metadata");
    r.real_count = m.at("real_count").get<std::size_t>();
    r.gen_count = m.at("gen_count").get<std::size_t>();
    r.options.grid = {m.at("grid").at(0).get<std::size_t>(), m.at("grid").at(1).get<std::size_t>()};
    r.options.length_bins = m.at("length_bins").get<std::size_t>();
    r.options.seed = m.at("seed").get<std::uint64_t>();
    return r;
  } catch (const json::exception& e) {
    throw Error("report_invalid", std::string("metric report: ") + e.what());
  }
}

inline std::string format_table(const MetricReport& r) {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed;
  os << "metric                 value (nats)\n";
  os << "density_error          " << r.density_error << "\n";
  os << "trip_error             " << r.trip_error << "\n";
  os << "trip_error (marginal)  " << r.trip_error_marginal << "\n";
  os << "length_error           " << r.length_error << "\n";
  os << "real=" << r.real_count << " gen=" << r.gen_count << " grid=" << r.options.grid.rows << "x"
     << r.options.grid.cols << " length_bins=" << r.options.length_bins << "\n";
  return os.str();
}

// ---- heatmaps -----------------------------------------------------------------

/// One occupancy grid per equal slice of the day, by each point's local
/// clock time (t modulo 86400 s). Out-of-frame points are skipped.
inline std::vector<GridHistogram> time_binned_histograms(const std::vector<Trajectory>& corpus,
                                                         const BoundingBox& frame, GridSpec grid,
                                                         std::size_t time_bins = 4) {
  require(time_bins > 0, "invalid_argument", "time_bins must be positive");
  std::vector<GridHistogram> out(time_bins, GridHistogram(frame, grid));
  for (const auto& t : corpus)
    for (const auto& p : t.points) {
      double s = std::fmod(p.t, 86400.0);
      if (s < 0.0) s += 86400.0;
      const auto k = std::min(time_bins - 1, static_cast<std::size_t>(s / 86400.0 * static_cast<double>(time_bins)));
      out[k].add(p.pos());
    }
  return out;
}

namespace detail {

/// Black-red-yellow-white ramp over [0, 1].
inline void heat_color(double v, unsigned char* rgb) {
  v = std::clamp(v, 0.0, 1.0);
  const auto ch = [](double x) { return static_cast<unsigned char>(std::lround(255.0 * std::clamp(x, 0.0, 1.0))); };
  rgb[0] = ch(3.0 * v);
  rgb[1] = ch(3.0 * v - 1.0);
  rgb[2] = ch(3.0 * v - 2.0);
}

inline void write_png_rgb(const std::filesystem::path& path, std::size_t width, std::size_t height,
                          const std::vector<unsigned char>& rgb) {
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  require(fp != nullptr, "io_error", "cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error("io_error", "failed to write " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y)
    png_write_row(png, const_cast<png_bytep>(rgb.data() + y * width * 3));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace detail

/// Writes `<stem>.csv` (time_bin,hour_start,hour_end,row,col,count) and one
/// `<stem>_<bin>.png` per time bin. All PNGs share one color scale; north is
/// up. Returns the histograms written.
inline std::vector<GridHistogram> heatmap_export(const std::vector<Trajectory>& corpus, const BoundingBox& frame,
                                                 GridSpec grid, std::size_t time_bins,
                                                 const std::filesystem::path& out_dir,
                                                 const std::string& stem = "heatmap", std::size_t cell_px = 16) {
  auto hists = time_binned_histograms(corpus, frame, grid, time_bins);
  std::filesystem::create_directories(out_dir);
  const double hours = 24.0 / static_cast<double>(time_bins);
  {
    std::ofstream os(out_dir / (stem + ".csv"));
    require(static_cast<bool>(os), "io_error", "cannot write heatmap CSV in " + out_dir.string());
    os << "time_bin,hour_start,hour_end,row,col,count\n";
    for (std::size_t k = 0; k < hists.size(); ++k)
      for (std::size_t r = 0; r < grid.rows; ++r)
        for (std::size_t c = 0; c < grid.cols; ++c)
          os << k << ',' << geo::format_double(hours * k) << ',' << geo::format_double(hours * (k + 1)) << ',' << r
             << ',' << c << ',' << hists[k].at(r, c) << '\n';
  }
  std::uint64_t peak = 0;
  for (const auto& h : hists)
    for (auto v : h.counts()) peak = std::max(peak, v);
  const std::size_t W = grid.cols * cell_px, H = grid.rows * cell_px;
  for (std::size_t k = 0; k < hists.size(); ++k) {
    std::vector<unsigned char> rgb(W * H * 3);
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t row = grid.rows - 1 - y / cell_px, col = x / cell_px;
        const double v = peak > 0 ? std::sqrt(static_cast<double>(hists[k].at(row, col)) / static_cast<double>(peak)) : 0.0;
        detail::heat_color(v, &rgb[(y * W + x) * 3]);
      }
    detail::write_png_rgb(out_dir / (stem + "_" + std::to_string(k) + ".png"), W, H, rgb);
  }
  return hists;
}

}  // namespace ctj::eval
