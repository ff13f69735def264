#pragma once

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctj/error.hpp"
#include "ctj/geo/types.hpp"

namespace ctj::geo {

using json = nlohmann::json;

/// Shortest decimal that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& ctx) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  require(res.ec == std::errc() && res.ptr == s.data() + s.size(), "csv_invalid",
          "cannot parse number '" + std::string(s) + "' (" + ctx + ")");
  return v;
}

struct NamedTrajectory {
  std::string id;
  Trajectory traj;
};

// ---- Trajectory CSV: traj_id,seq,lng,lat,t ---------------------------------

inline void write_trajectory_csv(std::ostream& os, const std::vector<NamedTrajectory>& trajs) {
  os << "traj_id,seq,lng,lat,t\n";
  for (const auto& nt : trajs) {
    for (std::size_t i = 0; i < nt.traj.size(); ++i) {
      const auto& p = nt.traj[i];
      os << nt.id << ',' << i << ',' << format_double(p.lng) << ',' << format_double(p.lat) << ','
         << format_double(p.t) << '\n';
    }
  }
}

inline void write_trajectory_csv(const std::string& path, const std::vector<NamedTrajectory>& trajs) {
  std::ofstream os(path, std::ios::binary);
  require(bool(os), "io_error", "cannot open " + path + " for writing");
  write_trajectory_csv(os, trajs);
}

/// Rows are grouped by traj_id (first-appearance order) and sorted by seq.
inline std::vector<NamedTrajectory> read_trajectory_csv(std::istream& is) {
  std::string line;
  require(bool(std::getline(is, line)), "csv_invalid", "missing header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  require(line == "traj_id,seq,lng,lat,t", "csv_invalid", "unexpected header: " + line);

  std::vector<std::string> order;
  std::map<std::string, std::vector<std::pair<long, GPSPoint>>> rows;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string_view> f;
    std::string_view sv(line);
    std::size_t start = 0;
    for (std::size_t i = 0; i <= sv.size(); ++i) {
      if (i == sv.size() || sv[i] == ',') {
        f.push_back(sv.substr(start, i - start));
        start = i + 1;
      }
    }
    const std::string ctx = "line " + std::to_string(lineno);
    require(f.size() == 5, "csv_invalid", "expected 5 fields at " + ctx);
    std::string id(f[0]);
    long seq = 0;
    auto r = std::from_chars(f[1].data(), f[1].data() + f[1].size(), seq);
    require(r.ec == std::errc(), "csv_invalid", "bad seq at " + ctx);
    GPSPoint p{parse_double(f[2], ctx), parse_double(f[3], ctx), parse_double(f[4], ctx)};
    auto [it, inserted] = rows.try_emplace(id);
    if (inserted) order.push_back(id);
    it->second.emplace_back(seq, p);
  }

  std::vector<NamedTrajectory> out;
  out.reserve(order.size());
  for (const auto& id : order) {
    auto& v = rows[id];
    std::stable_sort(v.begin(), v.end(), [](auto& a, auto& b) { return a.first < b.first; });
    NamedTrajectory nt{id, {}};
    nt.traj.points.reserve(v.size());
    for (auto& [seq, p] : v) nt.traj.points.push_back(p);
    out.push_back(std::move(nt));
  }
  return out;
}

inline std::vector<NamedTrajectory> read_trajectory_csv(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "io_error", "cannot open " + path);
  return read_trajectory_csv(is);
}

// ---- GeoJSON ------------------------------------------------------------------

inline json linestring_geometry(const std::vector<LngLat>& pts) {
  json coords = json::array();
  for (const auto& p : pts) coords.push_back({p.lng, p.lat});
  return {{"type", "LineString"}, {"coordinates", coords}};
}

inline std::vector<LngLat> parse_linestring(const json& geom) {
  require(geom.is_object() && geom.value("type", "") == "LineString", "geojson_invalid",
          "expected LineString geometry");
  std::vector<LngLat> pts;
  for (const auto& c : geom.at("coordinates")) {
    require(c.is_array() && c.size() >= 2, "geojson_invalid", "bad coordinate pair");
    pts.push_back({c[0].get<double>(), c[1].get<double>()});
  }
  return pts;
}

/// A LineString feature with its identifying property.
struct LineFeature {
  std::string id;
  std::vector<LngLat> coords;
  json properties;
};

inline json feature_collection(const std::vector<LineFeature>& features, const std::string& id_key) {
  json fc = {{"type", "FeatureCollection"}, {"features", json::array()}};
  for (const auto& f : features) {
    json props = f.properties.is_object() ? f.properties : json::object();
    props[id_key] = f.id;
    fc["features"].push_back(
        {{"type", "Feature"}, {"properties", props}, {"geometry", linestring_geometry(f.coords)}});
  }
  return fc;
}

/// Parses a FeatureCollection of LineStrings; `id_key` must be present in every
/// feature's properties.
inline std::vector<LineFeature> parse_feature_collection(const json& fc, const std::string& id_key) {
  require(fc.is_object() && fc.value("type", "") == "FeatureCollection", "geojson_invalid",
          "expected a FeatureCollection");
  std::vector<LineFeature> out;
  for (const auto& feat : fc.at("features")) {
    const auto& props = feat.at("properties");
    require(props.is_object() && props.contains(id_key), "geojson_invalid",
            "feature without required property '" + id_key + "'");
    const auto& idv = props.at(id_key);
    LineFeature f;
    f.id = idv.is_string() ? idv.get<std::string>() : idv.dump();
    f.coords = parse_linestring(feat.at("geometry"));
    f.properties = props;
    out.push_back(std::move(f));
  }
  return out;
}

inline json read_json_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(bool(is), "io_error", "cannot open " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw Error("json_invalid", path + ": " + e.what());
  }
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  require(bool(os), "io_error", "cannot open " + path + " for writing");
  os << text;
}

inline json attributes_to_json(const TripAttributes& a) {
  return {{"departure_time", a.departure_time},
          {"travel_time", a.travel_time},
          {"total_distance", a.total_distance},
          {"avg_speed", a.avg_speed}};
}

inline TripAttributes attributes_from_json(const json& j) {
  TripAttributes a;
  a.departure_time = j.at("departure_time").get<double>();
  a.travel_time = j.at("travel_time").get<double>();
  a.total_distance = j.at("total_distance").get<double>();
  a.avg_speed = j.at("avg_speed").get<double>();
  return a;
}

}  // namespace ctj::geo
