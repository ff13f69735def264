#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ctj/error.hpp"

namespace ctj::geo {

struct LngLat {
  double lng = 0.0;
  double lat = 0.0;

  friend bool operator==(const LngLat&, const LngLat&) = default;
};

/// A single fix: degrees WGS84 plus epoch seconds.
struct GPSPoint {
  double lng = 0.0;
  double lat = 0.0;
  double t = 0.0;

  LngLat pos() const { return {lng, lat}; }
  friend bool operator==(const GPSPoint&, const GPSPoint&) = default;
};

inline bool valid_coord(double lng, double lat) {
  return std::isfinite(lng) && std::isfinite(lat) && lng >= -180.0 && lng <= 180.0 &&
         lat >= -90.0 && lat <= 90.0;
}

/// Ordered GPS samples. At least two points, timestamps non-decreasing.
struct Trajectory {
  std::vector<GPSPoint> points;

  std::size_t size() const { return points.size(); }
  const GPSPoint& operator[](std::size_t i) const { return points[i]; }
  const GPSPoint& front() const { return points.front(); }
  const GPSPoint& back() const { return points.back(); }
};

inline void validate(const Trajectory& traj) {
  require(traj.size() >= 2, "trajectory_invalid", "trajectory needs at least 2 points");
  for (std::size_t i = 0; i < traj.size(); ++i) {
    const auto& p = traj[i];
    require(valid_coord(p.lng, p.lat), "trajectory_invalid",
            "coordinate out of range at index " + std::to_string(i));
    require(std::isfinite(p.t) && p.t >= 0.0, "trajectory_invalid",
            "bad timestamp at index " + std::to_string(i));
    if (i > 0) {
      require(p.t >= traj[i - 1].t, "trajectory_invalid",
              "timestamps decrease at index " + std::to_string(i));
    }
  }
}

/// Road-topology constraint: vertices define m = size()-1 line segments.
struct RoutePolyline {
  std::vector<LngLat> vertices;

  std::size_t size() const { return vertices.size(); }
  std::size_t segment_count() const { return vertices.empty() ? 0 : vertices.size() - 1; }
};

inline void validate(const RoutePolyline& route) {
  require(route.size() >= 2, "route_invalid", "route needs at least 2 vertices");
  for (std::size_t i = 0; i < route.size(); ++i) {
    const auto& v = route.vertices[i];
    require(valid_coord(v.lng, v.lat), "route_invalid",
            "route vertex out of range at index " + std::to_string(i));
    if (i > 0) {
      require(!(v == route.vertices[i - 1]), "route_invalid",
              "consecutive identical route vertices at index " + std::to_string(i));
    }
  }
}

struct TripAttributes {
  double departure_time = 0.0;  // hour of day in [0, 24)
  double travel_time = 0.0;     // seconds
  double total_distance = 0.0;  // meters
  double avg_speed = 0.0;       // m/s

  friend bool operator==(const TripAttributes&, const TripAttributes&) = default;
};

inline void validate(const TripAttributes& a) {
  require(std::isfinite(a.departure_time) && a.departure_time >= 0.0 && a.departure_time < 24.0,
          "attributes_invalid", "departure_time must be an hour in [0, 24)");
  require(std::isfinite(a.travel_time) && a.travel_time > 0.0, "attributes_invalid",
          "travel_time must be positive");
  require(std::isfinite(a.total_distance) && a.total_distance > 0.0, "attributes_invalid",
          "total_distance must be positive");
  require(std::isfinite(a.avg_speed) && a.avg_speed >= 0.0, "attributes_invalid",
          "avg_speed must be non-negative");
}

struct BoundingBox {
  double lng_min = 0.0;
  double lng_max = 0.0;
  double lat_min = 0.0;
  double lat_max = 0.0;

  double width() const { return lng_max - lng_min; }
  double height() const { return lat_max - lat_min; }
  LngLat center() const { return {0.5 * (lng_min + lng_max), 0.5 * (lat_min + lat_max)}; }
  bool contains(const LngLat& p) const {
    return p.lng >= lng_min && p.lng <= lng_max && p.lat >= lat_min && p.lat <= lat_max;
  }
  bool valid() const {
    return std::isfinite(lng_min) && std::isfinite(lng_max) && std::isfinite(lat_min) &&
           std::isfinite(lat_max) && lng_min < lng_max && lat_min < lat_max;
  }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline void validate(const BoundingBox& f) {
  require(f.valid(), "frame_invalid", "bounding box needs min < max on both axes");
}

/// Model-space track: row 0 normalized lng, row 1 normalized lat, both in [-1, 1].
/// `timestamps` ride along untouched so denormalize can rebuild a Trajectory.
struct NormalizedTrack {
  std::vector<double> coords;  // 2 x n, row-major
  std::vector<double> timestamps;
  BoundingBox frame;
  std::size_t clamped = 0;  // points that fell outside the frame

  std::size_t length() const { return coords.size() / 2; }
  double& x(std::size_t i) { return coords[i]; }
  double& y(std::size_t i) { return coords[length() + i]; }
  double x(std::size_t i) const { return coords[i]; }
  double y(std::size_t i) const { return coords[length() + i]; }
};

/// Training/evaluation record: a trajectory, its route, and its attributes.
struct Trip {
  std::string id;
  Trajectory traj;
  RoutePolyline route;
  TripAttributes attrs;
};

}  // namespace ctj::geo
