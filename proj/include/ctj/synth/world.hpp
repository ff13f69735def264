#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <queue>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctj/error.hpp"
#include "ctj/geo/geometry.hpp"
#include "ctj/geo/io.hpp"
#include "ctj/geo/types.hpp"
#include "ctj/rng.hpp"

namespace ctj::synth {

using geo::BoundingBox;
using geo::LngLat;

struct Edge {
  std::size_t u = 0;
  std::size_t v = 0;
  std::vector<LngLat> geometry;  // from node u to node v
  double length = 0.0;           // meters, haversine sum of geometry
};

struct RoadGraph {
  std::vector<LngLat> nodes;
  std::vector<Edge> edges;
  BoundingBox frame;

  /// adjacency[node] = list of edge indices touching it.
  std::vector<std::vector<std::size_t>> adjacency() const {
    std::vector<std::vector<std::size_t>> adj(nodes.size());
    for (std::size_t e = 0; e < edges.size(); ++e) {
      adj[edges[e].u].push_back(e);
      adj[edges[e].v].push_back(e);
    }
    return adj;
  }
};

struct WorldSpec {
  std::uint64_t seed = 1;
  std::size_t rows = 8;
  std::size_t cols = 8;
  double jitter = 0.2;             // fraction of a cell, [0, 0.4)
  double deletion_fraction = 0.1;  // share of lattice edges removed
  BoundingBox frame{104.00, 104.06, 30.62, 30.68};
};

inline void validate(const WorldSpec& s) {
  require(s.rows >= 3 && s.cols >= 3, "config_invalid", "world grid needs rows, cols >= 3");
  require(s.jitter >= 0.0 && s.jitter < 0.4, "config_invalid", "jitter must be in [0, 0.4)");
  require(s.deletion_fraction >= 0.0 && s.deletion_fraction < 0.5, "config_invalid",
          "deletion_fraction must be in [0, 0.5)");
  geo::validate(s.frame);
}

/// Connectivity over edges whose `alive` flag is set, by breadth-first search.
inline bool is_connected(const RoadGraph& g, const std::vector<char>& alive) {
  if (g.nodes.empty()) return true;
  std::vector<std::vector<std::size_t>> adj(g.nodes.size());
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    if (!alive[e]) continue;
    adj[g.edges[e].u].push_back(g.edges[e].v);
    adj[g.edges[e].v].push_back(g.edges[e].u);
  }
  std::vector<char> seen(g.nodes.size(), 0);
  std::queue<std::size_t> q;
  q.push(0);
  seen[0] = 1;
  std::size_t count = 1;
  while (!q.empty()) {
    auto n = q.front();
    q.pop();
    for (auto m : adj[n]) {
      if (!seen[m]) {
        seen[m] = 1;
        ++count;
        q.push(m);
      }
    }
  }
  return count == g.nodes.size();
}

inline bool is_connected(const RoadGraph& g) {
  return is_connected(g, std::vector<char>(g.edges.size(), 1));
}

/// Perturbed 4-connected lattice with a seeded share of edges removed while
/// keeping the graph connected.
inline RoadGraph build_city(const WorldSpec& spec) {
  validate(spec);
  Rng rng(derive_seed(spec.seed, {0x0C17}));
  RoadGraph g;
  g.frame = spec.frame;
  const double cw = spec.frame.width() / static_cast<double>(spec.cols);
  const double ch = spec.frame.height() / static_cast<double>(spec.rows);
  for (std::size_t r = 0; r < spec.rows; ++r) {
    for (std::size_t c = 0; c < spec.cols; ++c) {
      double lng = spec.frame.lng_min + (static_cast<double>(c) + 0.5) * cw;
      double lat = spec.frame.lat_min + (static_cast<double>(r) + 0.5) * ch;
      if (spec.jitter > 0.0) {
        lng += spec.jitter * cw * rng.uniform(-1.0, 1.0);
        lat += spec.jitter * ch * rng.uniform(-1.0, 1.0);
      }
      g.nodes.push_back({lng, lat});
    }
  }
  auto id = [&](std::size_t r, std::size_t c) { return r * spec.cols + c; };
  auto add_edge = [&](std::size_t u, std::size_t v) {
    Edge e{u, v, {g.nodes[u], g.nodes[v]}, 0.0};
    e.length = geo::path_length(e.geometry);
    g.edges.push_back(std::move(e));
  };
  for (std::size_t r = 0; r < spec.rows; ++r) {
    for (std::size_t c = 0; c < spec.cols; ++c) {
      if (c + 1 < spec.cols) add_edge(id(r, c), id(r, c + 1));
      if (r + 1 < spec.rows) add_edge(id(r, c), id(r + 1, c));
    }
  }

  const auto target = static_cast<std::size_t>(
      std::llround(spec.deletion_fraction * static_cast<double>(g.edges.size())));
  std::vector<char> alive(g.edges.size(), 1);
  std::size_t deleted = 0;
  int retries = 0;
  while (deleted < target) {
    std::vector<std::size_t> live;
    for (std::size_t e = 0; e < alive.size(); ++e)
      if (alive[e]) live.push_back(e);
    const auto pick = live[rng.below(live.size())];
    alive[pick] = 0;
    if (is_connected(g, alive)) {
      ++deleted;
      retries = 0;
    } else {
      alive[pick] = 1;
      if (++retries > 100) throw Error("world_disconnected", "edge deletion cannot keep the city connected");
    }
  }
  std::vector<Edge> kept;
  for (std::size_t e = 0; e < g.edges.size(); ++e)
    if (alive[e]) kept.push_back(std::move(g.edges[e]));
  g.edges = std::move(kept);
  return g;
}

struct ShortestPath {
  std::vector<std::size_t> nodes;
  std::vector<std::size_t> edges;
  double length = 0.0;
};

/// Dijkstra by edge length. Throws "unreachable" when no path exists.
inline ShortestPath shortest_path(const RoadGraph& g, std::size_t origin, std::size_t dest) {
  require(origin < g.nodes.size() && dest < g.nodes.size(), "invalid_argument", "node id out of range");
  const auto adj = g.adjacency();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> dist(g.nodes.size(), inf);
  std::vector<std::size_t> via(g.nodes.size(), SIZE_MAX);
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
  dist[origin] = 0.0;
  pq.push({0.0, origin});
  while (!pq.empty()) {
    auto [d, n] = pq.top();
    pq.pop();
    if (d > dist[n]) continue;
    if (n == dest) break;
    for (auto e : adj[n]) {
      const auto& edge = g.edges[e];
      const auto m = edge.u == n ? edge.v : edge.u;
      const double nd = d + edge.length;
      if (nd < dist[m]) {
        dist[m] = nd;
        via[m] = e;
        pq.push({nd, m});
      }
    }
  }
  require(dist[dest] < inf, "unreachable", "unreachable");
  ShortestPath sp;
  sp.length = dist[dest];
  for (std::size_t n = dest; n != origin;) {
    const auto e = via[n];
    sp.edges.push_back(e);
    sp.nodes.push_back(n);
    n = g.edges[e].u == n ? g.edges[e].v : g.edges[e].u;
  }
  sp.nodes.push_back(origin);
  std::reverse(sp.nodes.begin(), sp.nodes.end());
  std::reverse(sp.edges.begin(), sp.edges.end());
  return sp;
}

inline geo::RoutePolyline route_geometry(const RoadGraph& g, const ShortestPath& sp) {
  geo::RoutePolyline r;
  for (std::size_t i = 0; i < sp.edges.size(); ++i) {
    const auto& e = g.edges[sp.edges[i]];
    std::vector<LngLat> pts = e.geometry;
    if (e.u != sp.nodes[i]) std::reverse(pts.begin(), pts.end());
    for (std::size_t k = (r.vertices.empty() ? 0 : 1); k < pts.size(); ++k) r.vertices.push_back(pts[k]);
  }
  return r;
}

/// Peak hours 7-9 and 17-19 run at 70% of free-flow speed.
inline double time_of_day_factor(double hour) {
  return ((hour >= 7.0 && hour < 9.0) || (hour >= 17.0 && hour < 19.0)) ? 0.7 : 1.0;
}

struct SimParams {
  double noise_std = 15.0;        // meters
  double sample_interval = 15.0;  // seconds between GPS fixes
  double speed_mean = 8.0;        // m/s, lognormal mean
  double speed_sigma = 0.3;       // lognormal shape
};

struct SimulatedTrip {
  geo::Trajectory traj;
  geo::RoutePolyline route;
  geo::TripAttributes attrs;
};

/// Offsets `p` by (east, north) meters.
inline LngLat offset_meters(const LngLat& p, double east, double north) {
  const double dlat = north / geo::kEarthRadius / geo::kDegToRad;
  const double dlng = east / (geo::kEarthRadius * std::cos(p.lat * geo::kDegToRad)) / geo::kDegToRad;
  return {p.lng + dlng, p.lat + dlat};
}

/// Drives the shortest route at one lognormal speed. Fixes are taken every
/// `sample_interval` seconds and at each route vertex, then perturbed by
/// isotropic Gaussian noise. Attributes are the simulator's ground truth.
inline SimulatedTrip simulate_trip(const RoadGraph& g, std::size_t origin, std::size_t dest,
                                   double departure_hour, const SimParams& params, std::uint64_t seed) {
  require(origin != dest, "invalid_argument", "origin equals destination");
  require(departure_hour >= 0.0 && departure_hour < 24.0, "invalid_argument", "departure hour out of range");
  Rng rng(seed);
  const auto sp = shortest_path(g, origin, dest);
  SimulatedTrip out;
  out.route = route_geometry(g, sp);

  const double mu = std::log(params.speed_mean) - 0.5 * params.speed_sigma * params.speed_sigma;
  const double speed = std::exp(mu + params.speed_sigma * rng.normal()) * time_of_day_factor(departure_hour);
  const auto& verts = out.route.vertices;
  std::vector<double> cum(verts.size(), 0.0);
  for (std::size_t i = 1; i < verts.size(); ++i) cum[i] = cum[i - 1] + geo::haversine(verts[i - 1], verts[i]);
  const double length = cum.back();
  const double duration = length / speed;
  const double t0 = departure_hour * 3600.0;

  // Arc-length stations: regular fixes merged with vertex passages.
  std::vector<double> stations;
  for (double t = 0.0; t < duration; t += params.sample_interval) stations.push_back(t * speed);
  for (double c : cum) stations.push_back(c);
  std::sort(stations.begin(), stations.end());
  stations.erase(std::unique(stations.begin(), stations.end(),
                             [](double a, double b) { return std::abs(a - b) < 1e-6; }),
                 stations.end());
  stations.back() = length;

  std::size_t seg = 0;
  for (double s : stations) {
    while (seg + 2 < verts.size() && cum[seg + 1] < s) ++seg;
    const double seglen = cum[seg + 1] - cum[seg];
    const double f = seglen > 0.0 ? std::clamp((s - cum[seg]) / seglen, 0.0, 1.0) : 0.0;
    LngLat p{verts[seg].lng + f * (verts[seg + 1].lng - verts[seg].lng),
             verts[seg].lat + f * (verts[seg + 1].lat - verts[seg].lat)};
    if (params.noise_std > 0.0) {
      const double e = params.noise_std * rng.normal();
      const double n = params.noise_std * rng.normal();
      p = offset_meters(p, e, n);
    }
    out.traj.points.push_back({p.lng, p.lat, t0 + s / speed});
  }
  out.attrs = {departure_hour, duration, length, speed};
  return out;
}

struct CorpusParams {
  std::size_t n_trips = 1000;
  std::size_t model_length = 200;  // points per stored trajectory
  SimParams sim;
};

/// Nodes nearest the frame center (a quarter of them) draw 3x weight as trip
/// endpoints.
inline std::vector<double> endpoint_weights(const RoadGraph& g) {
  const auto c = g.frame.center();
  std::vector<std::size_t> idx(g.nodes.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<double> d(g.nodes.size());
  for (std::size_t i = 0; i < g.nodes.size(); ++i) d[i] = geo::haversine(g.nodes[i], c);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return d[a] < d[b]; });
  const auto n_central = (g.nodes.size() + 3) / 4;
  std::vector<double> w(g.nodes.size(), 1.0);
  for (std::size_t k = 0; k < n_central; ++k) w[idx[k]] = 3.0;
  return w;
}

inline std::size_t weighted_pick(const std::vector<double>& cdf, Rng& rng) {
  const double u = rng.uniform() * cdf.back();
  return static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
}

/// Daily departure profile: morning and evening peaks over a uniform floor.
inline double sample_departure_hour(Rng& rng) {
  const double u = rng.uniform();
  double h;
  if (u < 0.3) {
    h = rng.normal(8.0, 1.5);
  } else if (u < 0.6) {
    h = rng.normal(18.0, 1.5);
  } else {
    h = rng.uniform(0.0, 24.0);
  }
  h = std::fmod(h, 24.0);
  if (h < 0.0) h += 24.0;
  return h >= 24.0 ? 0.0 : h;
}

struct Endpoints {
  std::size_t origin;
  std::size_t dest;
  double departure;
};

inline Endpoints sample_endpoints(const std::vector<double>& cdf, Rng& rng) {
  Endpoints ep{};
  ep.origin = weighted_pick(cdf, rng);
  do ep.dest = weighted_pick(cdf, rng); while (ep.dest == ep.origin);
  ep.departure = sample_departure_hour(rng);
  return ep;
}

inline std::vector<double> weights_cdf(const std::vector<double>& w) {
  std::vector<double> cdf(w.size());
  std::partial_sum(w.begin(), w.end(), cdf.begin());
  return cdf;
}

inline std::string trip_id(std::size_t i) {
  std::string s = std::to_string(i);
  return "trip_" + std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s;
}

/// Independent simulated trips; trip i draws from derive_seed(seed, {i}) so the
/// corpus is identical however it is scheduled.
inline std::vector<geo::Trip> build_corpus(const RoadGraph& g, const CorpusParams& params, std::uint64_t seed) {
  const auto cdf = weights_cdf(endpoint_weights(g));
  std::vector<geo::Trip> corpus;
  corpus.reserve(params.n_trips);
  for (std::size_t i = 0; i < params.n_trips; ++i) {
    Rng rng(derive_seed(seed, {i}));
    const auto ep = sample_endpoints(cdf, rng);
    auto sim = simulate_trip(g, ep.origin, ep.dest, ep.departure, params.sim, rng.next_u64());
    geo::Trip trip;
    trip.id = trip_id(i);
    trip.traj = geo::resample(sim.traj, params.model_length);
    trip.route = std::move(sim.route);
    trip.attrs = sim.attrs;
    corpus.push_back(std::move(trip));
  }
  return corpus;
}

// ---- export / import ----------------------------------------------------------

inline geo::json world_geojson(const RoadGraph& g) {
  std::vector<geo::LineFeature> feats;
  feats.reserve(g.edges.size());
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const auto& edge = g.edges[e];
    feats.push_back({"r" + std::to_string(e), edge.geometry,
                     {{"u", edge.u}, {"v", edge.v}, {"length", edge.length}}});
  }
  auto fc = geo::feature_collection(feats, "road_id");
  fc["bbox"] = {g.frame.lng_min, g.frame.lat_min, g.frame.lng_max, g.frame.lat_max};
  return fc;
}

/// Accepts this library's exports (node ids in "u"/"v") and plain LineString
/// networks, whose endpoints are merged by exact coordinate match.
inline RoadGraph road_graph_from_geojson(const geo::json& fc) {
  const auto feats = geo::parse_feature_collection(fc, "road_id");
  RoadGraph g;
  std::vector<std::pair<LngLat, std::size_t>> index;
  auto node_for = [&](const LngLat& p) {
    for (auto& [q, id] : index)
      if (q == p) return id;
    g.nodes.push_back(p);
    index.emplace_back(p, g.nodes.size() - 1);
    return g.nodes.size() - 1;
  };
  const bool has_ids = !feats.empty() && std::all_of(feats.begin(), feats.end(), [](const auto& f) {
    return f.properties.contains("u") && f.properties.contains("v");
  });
  if (has_ids) {
    std::size_t n = 0;
    for (const auto& f : feats)
      n = std::max({n, f.properties["u"].get<std::size_t>() + 1, f.properties["v"].get<std::size_t>() + 1});
    g.nodes.assign(n, {});
  }
  for (const auto& f : feats) {
    require(f.coords.size() >= 2, "geojson_invalid", "road " + f.id + " has fewer than 2 points");
    Edge e;
    e.geometry = f.coords;
    if (has_ids) {
      e.u = f.properties["u"].get<std::size_t>();
      e.v = f.properties["v"].get<std::size_t>();
      g.nodes[e.u] = f.coords.front();
      g.nodes[e.v] = f.coords.back();
    } else {
      e.u = node_for(f.coords.front());
      e.v = node_for(f.coords.back());
    }
    e.length = f.properties.contains("length") ? f.properties["length"].get<double>()
                                               : geo::path_length(e.geometry);
    g.edges.push_back(std::move(e));
  }
  if (fc.contains("bbox") && fc["bbox"].size() == 4) {
    const auto& b = fc["bbox"];
    g.frame = {b[0].get<double>(), b[2].get<double>(), b[1].get<double>(), b[3].get<double>()};
  } else {
    g.frame = {180.0, -180.0, 90.0, -90.0};
    for (const auto& p : g.nodes) {
      g.frame.lng_min = std::min(g.frame.lng_min, p.lng);
      g.frame.lng_max = std::max(g.frame.lng_max, p.lng);
      g.frame.lat_min = std::min(g.frame.lat_min, p.lat);
      g.frame.lat_max = std::max(g.frame.lat_max, p.lat);
    }
  }
  return g;
}

inline geo::json routes_geojson(const std::vector<geo::Trip>& corpus) {
  std::vector<geo::LineFeature> feats;
  feats.reserve(corpus.size());
  for (const auto& t : corpus) feats.push_back({t.id, t.route.vertices, geo::attributes_to_json(t.attrs)});
  return geo::feature_collection(feats, "traj_id");
}

inline std::vector<geo::NamedTrajectory> named_trajectories(const std::vector<geo::Trip>& corpus) {
  std::vector<geo::NamedTrajectory> out;
  out.reserve(corpus.size());
  for (const auto& t : corpus) out.push_back({t.id, t.traj});
  return out;
}

/// Rebuilds trips from a trajectory CSV and (optionally) a routes GeoJSON.
/// Without a route, the route is the trajectory itself resampled to
/// `route_length` points, and attributes are derived from the trajectory.
inline std::vector<geo::Trip> import_corpus(const std::vector<geo::NamedTrajectory>& trajs,
                                            const geo::json* routes, std::size_t route_length = 200) {
  std::vector<geo::LineFeature> feats;
  if (routes) feats = geo::parse_feature_collection(*routes, "traj_id");
  std::unordered_map<std::string, const geo::LineFeature*> by_id;
  for (const auto& f : feats) by_id.emplace(f.id, &f);
  std::vector<geo::Trip> out;
  out.reserve(trajs.size());
  for (const auto& nt : trajs) {
    geo::Trip t;
    t.id = nt.id;
    t.traj = nt.traj;
    auto found = by_id.find(nt.id);
    if (found != by_id.end()) {
      const auto* it = found->second;
      t.route.vertices = it->coords;
      const auto& p = it->properties;
      t.attrs = p.contains("travel_time") ? geo::attributes_from_json(p) : geo::derive_attributes(t.traj);
    } else {
      t.route = geo::resample(geo::RoutePolyline{geo::positions(t.traj)}, route_length);
      t.attrs = geo::derive_attributes(t.traj);
    }
    out.push_back(std::move(t));
  }
  return out;
}

/// 64-bit FNV-1a, used for artifact hashes.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ctj::synth
