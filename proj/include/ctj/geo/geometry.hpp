#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "ctj/error.hpp"
#include "ctj/geo/types.hpp"

namespace ctj::geo {

inline constexpr double kEarthRadius = 6371000.0;
inline constexpr double kDegToRad = std::numbers::pi / 180.0;

/// Great-circle distance in meters.
inline double haversine(const LngLat& a, const LngLat& b) {
  const double phi1 = a.lat * kDegToRad;
  const double phi2 = b.lat * kDegToRad;
  const double dphi = phi2 - phi1;
  const double dlambda = (b.lng - a.lng) * kDegToRad;
  const double s1 = std::sin(0.5 * dphi);
  const double s2 = std::sin(0.5 * dlambda);
  const double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  return 2.0 * kEarthRadius * std::asin(std::sqrt(std::min(1.0, h)));
}

inline double path_length(std::span<const LngLat> pts) {
  double total = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) total += haversine(pts[i - 1], pts[i]);
  return total;
}

inline std::vector<LngLat> positions(const Trajectory& traj) {
  std::vector<LngLat> out;
  out.reserve(traj.size());
  for (const auto& p : traj.points) out.push_back(p.pos());
  return out;
}

inline double path_length(const Trajectory& traj) { return path_length(positions(traj)); }
inline double path_length(const RoutePolyline& r) { return path_length(r.vertices); }

namespace detail {

// Points at equal arc-length fractions along the polyline through `pts`;
// `times` (may be empty) is interpolated with the same weights.
inline void resample_arclength(std::span<const LngLat> pts, std::span<const double> times,
                               std::size_t n_target, std::vector<LngLat>& out_pts,
                               std::vector<double>& out_times) {
  require(pts.size() >= 2, "trajectory_invalid", "resample needs at least 2 points");
  require(n_target >= 2, "invalid_argument", "resample target length must be >= 2");
  std::vector<double> cum(pts.size(), 0.0);
  for (std::size_t i = 1; i < pts.size(); ++i) cum[i] = cum[i - 1] + haversine(pts[i - 1], pts[i]);
  const double total = cum.back();
  require(total > 0.0, "zero_length_path", "zero-length path");

  out_pts.assign(n_target, {});
  out_times.assign(times.empty() ? 0 : n_target, 0.0);
  std::size_t seg = 0;
  for (std::size_t k = 0; k < n_target; ++k) {
    if (k == 0 || k + 1 == n_target) {
      const std::size_t src = k == 0 ? 0 : pts.size() - 1;
      out_pts[k] = pts[src];
      if (!times.empty()) out_times[k] = times[src];
      continue;
    }
    const double s = total * static_cast<double>(k) / static_cast<double>(n_target - 1);
    while (seg + 2 < pts.size() && cum[seg + 1] < s) ++seg;
    const double len = cum[seg + 1] - cum[seg];
    const auto& a = pts[seg];
    const auto& b = pts[seg + 1];
    auto at = [&](double f) { return LngLat{a.lng + f * (b.lng - a.lng), a.lat + f * (b.lat - a.lat)}; };
    double f = len > 0.0 ? std::clamp((s - cum[seg]) / len, 0.0, 1.0) : 0.0;
    // Haversine distance is not linear in the lng/lat fraction; a few secant
    // corrections land on the exact arc length.
    for (int it = 0; it < 4 && len > 0.0; ++it)
      f = std::clamp(f - (haversine(a, at(f)) - (s - cum[seg])) / len, 0.0, 1.0);
    out_pts[k] = at(f);
    if (!times.empty()) out_times[k] = times[seg] + f * (times[seg + 1] - times[seg]);
  }
}

}  // namespace detail

/// Fixed-length resampling at equal arc-length fractions; endpoints kept,
/// timestamps interpolated linearly.
inline Trajectory resample(const Trajectory& traj, std::size_t n_target) {
  const auto pts = positions(traj);
  std::vector<double> times;
  times.reserve(traj.size());
  for (const auto& p : traj.points) times.push_back(p.t);
  std::vector<LngLat> out_pts;
  std::vector<double> out_times;
  detail::resample_arclength(pts, times, n_target, out_pts, out_times);
  Trajectory out;
  out.points.resize(n_target);
  for (std::size_t k = 0; k < n_target; ++k) {
    out.points[k] = {out_pts[k].lng, out_pts[k].lat, out_times[k]};
  }
  return out;
}

inline RoutePolyline resample(const RoutePolyline& route, std::size_t n_target) {
  require(!route.vertices.empty(), "route_invalid", "empty route");
  RoutePolyline out;
  std::vector<double> unused;
  detail::resample_arclength(route.vertices, {}, n_target, out.vertices, unused);
  return out;
}

/// Per-axis affine map of the frame onto [-1, 1]. Points outside the frame are
/// clamped and counted in `clamped`.
inline NormalizedTrack normalize(const Trajectory& traj, const BoundingBox& frame) {
  validate(frame);
  NormalizedTrack track;
  track.frame = frame;
  const std::size_t n = traj.size();
  track.coords.resize(2 * n);
  track.timestamps.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double u = 2.0 * (traj[i].lng - frame.lng_min) / frame.width() - 1.0;
    double v = 2.0 * (traj[i].lat - frame.lat_min) / frame.height() - 1.0;
    if (u < -1.0 || u > 1.0 || v < -1.0 || v > 1.0) {
      ++track.clamped;
      u = std::clamp(u, -1.0, 1.0);
      v = std::clamp(v, -1.0, 1.0);
    }
    track.x(i) = u;
    track.y(i) = v;
    track.timestamps[i] = traj[i].t;
  }
  return track;
}

inline NormalizedTrack normalize(const RoutePolyline& route, const BoundingBox& frame) {
  Trajectory tmp;
  tmp.points.reserve(route.size());
  for (const auto& v : route.vertices) tmp.points.push_back({v.lng, v.lat, 0.0});
  return normalize(tmp, frame);
}

inline LngLat denormalize_point(double u, double v, const BoundingBox& frame) {
  return {frame.lng_min + 0.5 * (u + 1.0) * frame.width(),
          frame.lat_min + 0.5 * (v + 1.0) * frame.height()};
}

inline Trajectory denormalize(const NormalizedTrack& track) {
  validate(track.frame);
  const std::size_t n = track.length();
  Trajectory out;
  out.points.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = denormalize_point(track.x(i), track.y(i), track.frame);
    out.points[i] = {p.lng, p.lat, i < track.timestamps.size() ? track.timestamps[i] : 0.0};
  }
  return out;
}

/// Departure hour, duration, haversine length and mean speed of a recorded trip.
inline TripAttributes derive_attributes(const Trajectory& traj) {
  require(traj.size() >= 2, "trajectory_invalid", "need at least 2 points");
  TripAttributes a;
  const double t0 = traj.front().t;
  a.departure_time = std::fmod(t0, 86400.0) / 3600.0;
  a.travel_time = traj.back().t - t0;
  require(a.travel_time > 0.0, "zero_travel_time", "zero travel time");
  a.total_distance = path_length(traj);
  a.avg_speed = a.total_distance / a.travel_time;
  return a;
}

/// Timestamps for a generated track: travel_time spread uniformly over the
/// points, starting at the departure hour of day zero.
inline std::vector<double> uniform_timestamps(const TripAttributes& attrs, std::size_t n) {
  std::vector<double> t(n);
  const double t0 = attrs.departure_time * 3600.0;
  for (std::size_t i = 0; i < n; ++i) {
    t[i] = n > 1 ? t0 + attrs.travel_time * static_cast<double>(i) / static_cast<double>(n - 1) : t0;
  }
  return t;
}

/// Distance in meters from `p` to segment [a, b]: projection in the local
/// tangent plane at `p`, distance to the foot measured by haversine.
inline double point_segment_distance(const LngLat& p, const LngLat& a, const LngLat& b) {
  const double kx = std::cos(p.lat * kDegToRad);
  const double ax = (a.lng - p.lng) * kx, ay = a.lat - p.lat;
  const double bx = (b.lng - p.lng) * kx, by = b.lat - p.lat;
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double f = 0.0;
  if (len2 > 0.0) f = std::clamp(-(ax * dx + ay * dy) / len2, 0.0, 1.0);
  const LngLat foot{a.lng + f * (b.lng - a.lng), a.lat + f * (b.lat - a.lat)};
  return haversine(p, foot);
}

inline double point_polyline_distance(const LngLat& p, std::span<const LngLat> poly) {
  require(!poly.empty(), "route_invalid", "empty route");
  if (poly.size() == 1) return haversine(p, poly[0]);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t j = 1; j < poly.size(); ++j) {
    best = std::min(best, point_segment_distance(p, poly[j - 1], poly[j]));
  }
  return best;
}

}  // namespace ctj::geo
