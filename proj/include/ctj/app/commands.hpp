#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctj/app/config.hpp"
#include "ctj/diffusion/engine.hpp"
#include "ctj/diffusion/pipeline.hpp"
#include "ctj/error.hpp"
#include "ctj/eval/metrics.hpp"
#include "ctj/geo/io.hpp"
#include "ctj/mae/road_mae.hpp"
#include "ctj/rng.hpp"
#include "ctj/synth/world.hpp"
#include "ctj/unet/geo_unet.hpp"

namespace ctj::app {

/// File names inside a run directory.
namespace layout {
inline constexpr const char* kWorld = "world.geojson";
inline constexpr const char* kTrips = "trips.csv";
inline constexpr const char* kRoutes = "routes.geojson";
inline constexpr const char* kSynthManifest = "synth.json";
inline constexpr const char* kRoadMae = "road_mae";
inline constexpr const char* kDiffusion = "diffusion";
inline constexpr const char* kGenerated = "generated.csv";
inline constexpr const char* kReport = "report.json";
}  // namespace layout

using Log = std::function<void(const std::string&)>;

inline Log stderr_log() {
  return [](const std::string& line) { std::cerr << line << '\n'; };
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string file_hash(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  require(static_cast<bool>(is), "io_error", "cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return hex64(synth::fnv1a(ss.str()));
}

/// Training and held-out trips of a synthesized run.
struct CorpusSplit {
  std::vector<geo::Trip> train;
  std::vector<geo::Trip> holdout;
};

inline std::vector<geo::Trip> load_corpus(const fs::path& dir) {
  require(fs::exists(dir / layout::kTrips), "corpus_missing", "no corpus in " + dir.string() + " (run synth first)");
  const auto routes = geo::read_json_file((dir / layout::kRoutes).string());
  return synth::import_corpus(geo::read_trajectory_csv((dir / layout::kTrips).string()), &routes);
}

inline CorpusSplit split_corpus(std::vector<geo::Trip> all, std::size_t holdout) {
  require(holdout < all.size(), "config_invalid", "holdout leaves no training trips");
  CorpusSplit s;
  const auto cut = all.begin() + static_cast<std::ptrdiff_t>(all.size() - holdout);
  s.train.assign(std::make_move_iterator(all.begin()), std::make_move_iterator(cut));
  s.holdout.assign(std::make_move_iterator(cut), std::make_move_iterator(all.end()));
  return s;
}

inline std::vector<geo::Trajectory> trajectories_of(const std::vector<geo::Trip>& trips) {
  std::vector<geo::Trajectory> out;
  out.reserve(trips.size());
  for (const auto& t : trips) out.push_back(t.traj);
  return out;
}

inline std::vector<geo::RoutePolyline> routes_of(const std::vector<geo::Trip>& trips) {
  std::vector<geo::RoutePolyline> out;
  out.reserve(trips.size());
  for (const auto& t : trips) out.push_back(t.route);
  return out;
}

// ---- synth ------------------------------------------------------------------------

/// World, corpus and route files for `cfg`; returns the synth manifest.
inline json cmd_synth(const RunConfig& cfg, const Log& log = stderr_log()) {
  const fs::path out(cfg.out);
  fs::create_directories(out);
  const auto g = synth::build_city(cfg.world);
  const auto corpus = synth::build_corpus(g, cfg.corpus, cfg.seed);
  geo::write_text_file((out / layout::kWorld).string(), synth::world_geojson(g).dump());
  geo::write_trajectory_csv((out / layout::kTrips).string(), synth::named_trajectories(corpus));
  geo::write_text_file((out / layout::kRoutes).string(), synth::routes_geojson(corpus).dump());
  json manifest = {{"config_hash", config_hash(cfg)},
                   {"seed", cfg.seed},
                   {"nodes", g.nodes.size()},
                   {"edges", g.edges.size()},
                   {"n_trips", corpus.size()},
                   {"holdout", cfg.holdout},
                   {"files", json::object()}};
  for (const char* f : {layout::kWorld, layout::kTrips, layout::kRoutes}) manifest["files"][f] = file_hash(out / f);
  nn::write_json(out / layout::kSynthManifest, manifest);
  log("synth: " + std::to_string(g.nodes.size()) + " nodes, " + std::to_string(g.edges.size()) + " edges, " +
      std::to_string(corpus.size()) + " trips -> " + out.string());
  return manifest;
}

// ---- train-roadmae -----------------------------------------------------------------

inline json cmd_train_roadmae(const RunConfig& cfg, const Log& log = stderr_log()) {
  const fs::path out(cfg.out);
  const auto split = split_corpus(load_corpus(out), cfg.holdout);
  std::vector<mae::PatchSequence> routes;
  routes.reserve(split.train.size());
  for (const auto& t : split.train)
    routes.push_back(mae::patchify(t.route, cfg.road_mae.route_length, cfg.road_mae.patch_length, cfg.world.frame));
  mae::RoadMae<float> model(cfg.road_mae, derive_seed(cfg.seed, {0x3AE}));
  model.frame = cfg.world.frame;
  auto pc = cfg.road_mae_training;
  pc.seed = derive_seed(cfg.seed, {0x3AF});
  log("train-roadmae: " + std::to_string(routes.size()) + " routes, " + std::to_string(pc.epochs) + " epochs");
  const auto result = mae::pretrain(model, routes, pc, [&](std::size_t step, double loss) {
    log("  step " + std::to_string(step) + " loss " + geo::format_double(loss));
  });
  const fs::path dir = out / layout::kRoadMae;
  fs::remove_all(dir);
  fs::create_directories(dir);
  json extra = {{"config_hash", config_hash(cfg)}, {"steps", result.steps}};
  if (!result.losses.empty()) extra["final_loss"] = result.losses.back();
  model.save(dir, extra);
  std::ofstream os(dir / "losses.csv");
  os << "step,loss\n";
  for (std::size_t i = 0; i < result.losses.size(); ++i) os << i + 1 << ',' << geo::format_double(result.losses[i]) << '\n';
  log("train-roadmae: " + std::to_string(result.steps) + " steps -> " + dir.string());
  return extra;
}

// ---- train-diffusion ---------------------------------------------------------------

inline json cmd_train_diffusion(const RunConfig& cfg, bool resume, const Log& log = stderr_log()) {
  const fs::path out(cfg.out);
  const fs::path mae_dir = out / layout::kRoadMae;
  require(fs::exists(mae_dir / "manifest.json"), "checkpoint_missing",
          "no RoadMAE checkpoint in " + mae_dir.string() + " (run train-roadmae first)");
  const auto road_mae = mae::RoadMae<float>::load(mae_dir);
  require(road_mae.config().dim == cfg.unet.context_dim, "config_invalid",
          "RoadMAE checkpoint width differs from unet.context_dim");
  require(road_mae.frame == cfg.world.frame, "frame_mismatch", "RoadMAE checkpoint frame differs from world.frame");
  const auto split = split_corpus(load_corpus(out), cfg.holdout);
  std::vector<geo::TripAttributes> attrs;
  for (const auto& t : split.train) attrs.push_back(t.attrs);
  const auto stats = unet::compute_attribute_stats(attrs);
  const auto& tc = cfg.diffusion_training;
  log("train-diffusion: encoding " + std::to_string(split.train.size()) + " routes x " +
      std::to_string(tc.mask_ratio > 0.0 ? tc.mask_variants : 1) + " mask variants");
  const auto set = diffusion::build_training_set(split.train, road_mae, cfg.unet.length, stats, tc.mask_ratio,
                                                 tc.mask_variants, derive_seed(cfg.seed, {0x75E7}));
  unet::GeoUNet<float> net(cfg.unet, derive_seed(cfg.seed, {0x6E0}));
  diffusion::BundleMeta meta;
  meta.schedule = diffusion::build_schedule(cfg.unet.diffusion_steps, cfg.beta_1, cfg.beta_T);
  meta.frame = cfg.world.frame;
  meta.stats = stats;
  meta.road_mae_ref = (fs::path("..") / layout::kRoadMae).string();
  meta.extra = {{"config_hash", config_hash(cfg)},
                {"sampler", sampler_json(cfg.sampler)}};
  auto tcfg = tc;
  tcfg.seed = derive_seed(cfg.seed, {0xD1F5});
  const fs::path dir = out / layout::kDiffusion;
  const auto result = diffusion::train(net, set, meta, tcfg, dir, resume, [&](std::size_t step, double loss) {
    log("  step " + std::to_string(step) + " loss " + geo::format_double(loss));
  });
  log("train-diffusion: steps " + std::to_string(result.start_step) + " -> " + std::to_string(tc.steps) + " in " +
      dir.string());
  json summary = {{"config_hash", config_hash(cfg)}, {"start_step", result.start_step}, {"steps", tc.steps}};
  if (!result.losses.empty()) summary["final_loss"] = result.losses.back();
  return summary;
}

// ---- generation requests -------------------------------------------------------------

/// Request body shared by the CLI and the HTTP service.
struct ParsedRequest {
  diffusion::GenerationRequest request;
  bool has_seed = false;
};

/// Missing attributes come from the corpus medians; when exactly one of
/// travel time, distance and speed is missing it is derived from the other two.
inline geo::TripAttributes complete_attributes(const json& j, const geo::TripAttributes& median) {
  require(j.is_object(), "attributes_invalid", "attributes must be an object");
  static const char* kKeys[] = {"departure_time", "travel_time", "total_distance", "avg_speed"};
  for (const auto& [key, value] : j.items()) {
    require(std::find_if(std::begin(kKeys), std::end(kKeys), [&](const char* k) { return key == k; }) != std::end(kKeys),
            "attributes_invalid", "unknown attribute '" + key + "'");
    require(value.is_number(), "attributes_invalid", "attribute '" + key + "' must be a number");
  }
  geo::TripAttributes a = median;
  const auto get = [&](const char* k, double& slot) {
    if (!j.contains(k)) return false;
    slot = j.at(k).get<double>();
    return true;
  };
  get("departure_time", a.departure_time);
  const bool tt = get("travel_time", a.travel_time);
  const bool d = get("total_distance", a.total_distance);
  const bool sp = get("avg_speed", a.avg_speed);
  if (tt && d && !sp && a.travel_time > 0.0) a.avg_speed = a.total_distance / a.travel_time;
  if (tt && !d && sp) a.total_distance = a.avg_speed * a.travel_time;
  if (!tt && d && sp && a.avg_speed > 0.0) a.travel_time = a.total_distance / a.avg_speed;
  geo::validate(a);
  return a;
}

inline geo::RoutePolyline parse_route(const json& j) {
  require(j.is_array(), "route_invalid", "route must be an array of [lng, lat] pairs");
  geo::RoutePolyline r;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& v = j[i];
    require(v.is_array() && v.size() == 2 && v[0].is_number() && v[1].is_number(), "route_invalid",
            "route vertex " + std::to_string(i) + " must be [lng, lat]");
    r.vertices.push_back({v[0].get<double>(), v[1].get<double>()});
  }
  geo::validate(r);
  return r;
}

inline ParsedRequest parse_generation_request(const json& body, const geo::TripAttributes& median) {
  require(body.is_object(), "request_invalid", "request body must be a JSON object");
  for (const auto& [key, value] : body.items()) {
    require(key == "route" || key == "attributes" || key == "count" || key == "mask_ratio" || key == "seed",
            "request_invalid", "unknown request field '" + key + "'");
  }
  require(body.contains("route"), "route_invalid", "request has no route");
  ParsedRequest p;
  auto& r = p.request;
  r.route = parse_route(body.at("route"));
  r.attrs = complete_attributes(body.value("attributes", json::object()), median);
  if (body.contains("count")) {
    const auto& c = body.at("count");
    require(c.is_number_integer() && c.get<std::int64_t>() >= 1 && c.get<std::int64_t>() <= 1024, "invalid_argument",
            "count must be an integer in [1, 1024]");
    r.count = c.get<std::size_t>();
  }
  if (body.contains("mask_ratio")) {
    const auto& m = body.at("mask_ratio");
    require(m.is_number() && m.get<double>() >= 0.0 && m.get<double>() <= 0.75, "invalid_argument",
            "mask_ratio must be a number in [0, 0.75]");
    r.mask_ratio = m.get<double>();
  }
  if (body.contains("seed") && !body.at("seed").is_null()) {
    const auto& s = body.at("seed");
    require(s.is_number_unsigned() || (s.is_number_integer() && s.get<std::int64_t>() >= 0), "invalid_argument",
            "seed must be a non-negative integer");
    r.seed = s.get<std::uint64_t>();
    p.has_seed = true;
  }
  return p;
}

inline std::vector<geo::NamedTrajectory> name_trajectories(const std::vector<geo::Trajectory>& trajs,
                                                           const std::string& prefix) {
  std::vector<geo::NamedTrajectory> out;
  for (std::size_t i = 0; i < trajs.size(); ++i) {
    std::string s = std::to_string(i);
    out.push_back({prefix + std::string(s.size() < 6 ? 6 - s.size() : 0, '0') + s, trajs[i]});
  }
  return out;
}

/// One generated trajectory per held-out trip, conditioned on its route and
/// attributes; trip i samples with derive_seed(seed, {0x6E, i}).
inline std::vector<geo::Trajectory> generate_for_trips(const diffusion::TrajectoryGenerator& gen,
                                                       const std::vector<geo::Trip>& trips,
                                                       const diffusion::SamplerConfig& sampler, double mask_ratio,
                                                       std::uint64_t seed) {
  std::vector<diffusion::Condition> conds;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < trips.size(); ++i) {
    conds.push_back({gen.route_tokens(trips[i].route, mask_ratio, derive_seed(seed, {0x6D, i})), trips[i].attrs});
    seeds.push_back(derive_seed(seed, {0x6E, i}));
  }
  const auto samples = gen.sample(conds, seeds, sampler);
  std::vector<geo::Trajectory> out;
  for (std::size_t i = 0; i < samples.size(); ++i) out.push_back(gen.to_trajectory(samples[i], trips[i].attrs));
  return out;
}

// ---- generate ------------------------------------------------------------------------

/// With `request_path`, generates for that request body; otherwise one
/// trajectory per held-out trip. Writes generated.csv under cfg.out.
inline json cmd_generate(const RunConfig& cfg, const std::optional<fs::path>& request_path,
                         const std::optional<fs::path>& checkpoint = std::nullopt, const Log& log = stderr_log()) {
  const fs::path out(cfg.out);
  const auto gen = diffusion::TrajectoryGenerator::load(checkpoint.value_or(out / layout::kDiffusion));
  json summary = {{"sampler", sampler_json(cfg.sampler)}};
  std::vector<geo::NamedTrajectory> named;
  if (request_path) {
    const auto body = geo::read_json_file(request_path->string());
    auto parsed = parse_generation_request(body, gen.meta.stats.median);
    if (!parsed.has_seed) parsed.request.seed = cfg.seed;
    const auto trajs = gen.generate(parsed.request, cfg.sampler);
    named = name_trajectories(trajs, "gen_");
    summary["count"] = trajs.size();
    summary["seed"] = parsed.request.seed;
    summary["adherence_m"] = eval::route_adherence(trajs, parsed.request.route);
  } else {
    const auto split = split_corpus(load_corpus(out), cfg.holdout);
    const auto trajs = generate_for_trips(gen, split.holdout, cfg.sampler, 0.0, cfg.seed);
    for (std::size_t i = 0; i < trajs.size(); ++i) named.push_back({split.holdout[i].id, trajs[i]});
    summary["count"] = trajs.size();
    summary["seed"] = cfg.seed;
    summary["adherence_m"] = eval::route_adherence(trajs, routes_of(split.holdout));
  }
  fs::create_directories(out);
  geo::write_trajectory_csv((out / layout::kGenerated).string(), named);
  log("generate: " + std::to_string(named.size()) + " trajectories, adherence " +
      geo::format_double(summary["adherence_m"].get<double>()) + " m -> " + (out / layout::kGenerated).string());
  return summary;
}

// ---- eval ------------------------------------------------------------------------------

/// Defaults: real = held-out trips of the run, generated = generated.csv.
/// Writes report.json (and heatmaps when `heatmap_dir` is set).
inline eval::MetricReport cmd_eval(const RunConfig& cfg, const std::optional<fs::path>& real_path,
                                   const std::optional<fs::path>& gen_path,
                                   const std::optional<fs::path>& heatmap_dir = std::nullopt,
                                   const Log& log = stderr_log()) {
  const fs::path out(cfg.out);
  std::vector<geo::Trajectory> real;
  if (real_path) {
    for (auto& nt : geo::read_trajectory_csv(real_path->string())) real.push_back(std::move(nt.traj));
  } else {
    real = trajectories_of(split_corpus(load_corpus(out), cfg.holdout).holdout);
  }
  std::vector<geo::Trajectory> gen;
  for (auto& nt : geo::read_trajectory_csv(gen_path.value_or(out / layout::kGenerated).string()))
    gen.push_back(std::move(nt.traj));
  auto opts = cfg.eval;
  opts.seed = cfg.seed;
  const auto report = eval::evaluate(real, gen, cfg.world.frame, opts);
  fs::create_directories(out);
  nn::write_json(out / layout::kReport, eval::to_json(report));
  if (heatmap_dir) {
    eval::heatmap_export(real, cfg.world.frame, opts.grid, 4, *heatmap_dir, "real");
    eval::heatmap_export(gen, cfg.world.frame, opts.grid, 4, *heatmap_dir, "generated");
  }
  log(eval::format_table(report));
  return report;
}

}  // namespace ctj::app
