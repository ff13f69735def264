#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include <nlohmann/json.hpp>

#include "ctj/diffusion/engine.hpp"
#include "ctj/diffusion/schedule.hpp"
#include "ctj/error.hpp"
#include "ctj/eval/metrics.hpp"
#include "ctj/geo/io.hpp"
#include "ctj/mae/road_mae.hpp"
#include "ctj/synth/world.hpp"
#include "ctj/unet/geo_unet.hpp"

namespace ctj::app {

using json = nlohmann::json;
namespace fs = std::filesystem;

/// Everything a pipeline run depends on. Defaults are the full-size model;
/// desk and smoke presets live in configs/.
struct RunConfig {
  std::uint64_t seed = 1;
  synth::WorldSpec world;
  synth::CorpusParams corpus;
  std::size_t holdout = 64;  // trailing trips kept out of training
  mae::RoadMaeConfig road_mae;
  mae::PretrainConfig road_mae_training;
  unet::UNetConfig unet;
  double beta_1 = 1e-4;
  double beta_T = 0.05;
  diffusion::TrainConfig diffusion_training;
  diffusion::SamplerConfig sampler;
  eval::EvalOptions eval;
  std::string out = "runs/default";

  std::size_t training_trips() const { return corpus.n_trips - holdout; }
};

inline json sampler_json(const diffusion::SamplerConfig& s) {
  return {{"mode", diffusion::to_string(s.mode)}, {"skip", s.skip}, {"clip_x0", s.clip_x0}};
}

inline json to_json(const RunConfig& c) {
  const auto& w = c.world;
  const auto& cp = c.corpus;
  const auto& rt = c.road_mae_training;
  const auto& dt = c.diffusion_training;
  return {
      {"seed", c.seed},
      {"out", c.out},
      {"world",
       {{"seed", w.seed},
        {"rows", w.rows},
        {"cols", w.cols},
        {"jitter", w.jitter},
        {"deletion_fraction", w.deletion_fraction},
        {"frame", mae::frame_to_json(w.frame)}}},
      {"corpus",
       {{"n_trips", cp.n_trips},
        {"holdout", c.holdout},
        {"model_length", cp.model_length},
        {"noise_std", cp.sim.noise_std},
        {"sample_interval", cp.sim.sample_interval},
        {"speed_mean", cp.sim.speed_mean},
        {"speed_sigma", cp.sim.speed_sigma}}},
      {"road_mae", mae::to_json(c.road_mae)},
      {"road_mae_training",
       {{"epochs", rt.epochs}, {"batch_size", rt.batch_size}, {"max_steps", rt.max_steps}, {"lr", rt.lr},
        {"log_every", rt.log_every}}},
      {"unet", unet::to_json(c.unet)},
      {"schedule", {{"T", c.unet.diffusion_steps}, {"beta_1", c.beta_1}, {"beta_T", c.beta_T}}},
      {"diffusion_training",
       {{"steps", dt.steps},
        {"batch_size", dt.batch_size},
        {"lr", dt.lr},
        {"lr_final", dt.lr_final},
        {"mask_ratio", dt.mask_ratio},
        {"mask_variants", dt.mask_variants},
        {"checkpoint_every", dt.checkpoint_every},
        {"log_every", dt.log_every}}},
      {"sampler", sampler_json(c.sampler)},
      {"eval", {{"grid", {c.eval.grid.rows, c.eval.grid.cols}}, {"length_bins", c.eval.length_bins}}},
  };
}

namespace detail {

inline bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return a.type() == b.type();
}

/// Overlays `user` onto `base`. Every user key must exist in `base` with a
/// compatible JSON type; arrays replace wholesale.
inline void overlay(json& base, const json& user, const std::string& path) {
  require(user.is_object(), "config_invalid", (path.empty() ? std::string("config") : path) + " must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    require(base.contains(key), "config_invalid", "unknown config key '" + where + "'");
    auto& slot = base[key];
    if (slot.is_object()) {
      overlay(slot, value, where);
    } else {
      require(same_kind(slot, value), "config_invalid",
              "config key '" + where + "' expects " + std::string(slot.type_name()) + ", got " + value.type_name());
      slot = value;
    }
  }
}

}  // namespace detail

/// Builds a config from defaults plus `user`; unknown keys and wrong types
/// are rejected.
inline RunConfig config_from_json(const json& user) {
  json j = to_json(RunConfig{});
  detail::overlay(j, user, "");
  try {
    RunConfig c;
    c.seed = j.at("seed").get<std::uint64_t>();
    c.out = j.at("out").get<std::string>();
    const auto& w = j.at("world");
    c.world.seed = w.at("seed").get<std::uint64_t>();
    c.world.rows = w.at("rows").get<std::size_t>();
    c.world.cols = w.at("cols").get<std::size_t>();
    c.world.jitter = w.at("jitter").get<double>();
    c.world.deletion_fraction = w.at("deletion_fraction").get<double>();
    c.world.frame = mae::frame_from_json(w.at("frame"));
    synth::validate(c.world);
    const auto& cp = j.at("corpus");
    c.corpus.n_trips = cp.at("n_trips").get<std::size_t>();
    c.holdout = cp.at("holdout").get<std::size_t>();
    c.corpus.model_length = cp.at("model_length").get<std::size_t>();
    c.corpus.sim.noise_std = cp.at("noise_std").get<double>();
    c.corpus.sim.sample_interval = cp.at("sample_interval").get<double>();
    c.corpus.sim.speed_mean = cp.at("speed_mean").get<double>();
    c.corpus.sim.speed_sigma = cp.at("speed_sigma").get<double>();
    require(c.holdout < c.corpus.n_trips, "config_invalid", "corpus.holdout must be smaller than corpus.n_trips");
    require(c.corpus.model_length >= 2, "config_invalid", "corpus.model_length must be >= 2");
    require(c.corpus.sim.noise_std >= 0.0 && c.corpus.sim.sample_interval > 0.0 && c.corpus.sim.speed_mean > 0.0 &&
                c.corpus.sim.speed_sigma >= 0.0,
            "config_invalid", "corpus simulation parameters out of range");
    c.road_mae = mae::road_mae_config_from_json(j.at("road_mae"));
    const auto& rt = j.at("road_mae_training");
    c.road_mae_training.epochs = rt.at("epochs").get<std::size_t>();
    c.road_mae_training.batch_size = rt.at("batch_size").get<std::size_t>();
    c.road_mae_training.max_steps = rt.at("max_steps").get<std::size_t>();
    c.road_mae_training.lr = rt.at("lr").get<double>();
    c.road_mae_training.log_every = rt.at("log_every").get<std::size_t>();
    c.road_mae_training.mask_ratio = c.road_mae.mask_ratio;
    require(c.road_mae_training.batch_size >= 1 && c.road_mae_training.lr > 0.0, "config_invalid",
            "road_mae_training needs batch_size >= 1 and lr > 0");
    c.unet = unet::unet_config_from_json(j.at("unet"));
    const auto& s = j.at("schedule");
    require(s.at("T").get<std::size_t>() == c.unet.diffusion_steps, "config_invalid",
            "schedule.T must equal unet.diffusion_steps");
    c.beta_1 = s.at("beta_1").get<double>();
    c.beta_T = s.at("beta_T").get<double>();
    const auto sched = diffusion::build_schedule(c.unet.diffusion_steps, c.beta_1, c.beta_T);
    require(c.unet.context_dim == c.road_mae.dim, "config_invalid", "unet.context_dim must equal road_mae.dim");
    require(c.unet.length == c.corpus.model_length, "config_invalid", "unet.length must equal corpus.model_length");
    const auto& dt = j.at("diffusion_training");
    c.diffusion_training.steps = dt.at("steps").get<std::size_t>();
    c.diffusion_training.batch_size = dt.at("batch_size").get<std::size_t>();
    c.diffusion_training.lr = dt.at("lr").get<double>();
    c.diffusion_training.lr_final = dt.at("lr_final").get<double>();
    c.diffusion_training.mask_ratio = dt.at("mask_ratio").get<double>();
    c.diffusion_training.mask_variants = dt.at("mask_variants").get<std::size_t>();
    c.diffusion_training.checkpoint_every = dt.at("checkpoint_every").get<std::size_t>();
    c.diffusion_training.log_every = dt.at("log_every").get<std::size_t>();
    require(c.diffusion_training.batch_size >= 1 && c.diffusion_training.lr > 0.0 &&
                c.diffusion_training.mask_variants >= 1,
            "config_invalid", "diffusion_training needs batch_size >= 1, lr > 0, mask_variants >= 1");
    require(c.diffusion_training.mask_ratio >= 0.0 && c.diffusion_training.mask_ratio < 1.0, "config_invalid",
            "diffusion_training.mask_ratio must be in [0, 1)");
    const auto& sm = j.at("sampler");
    c.sampler.mode = diffusion::sampler_mode_from_string(sm.at("mode").get<std::string>());
    c.sampler.skip = sm.at("skip").get<std::size_t>();
    c.sampler.clip_x0 = sm.at("clip_x0").get<bool>();
    diffusion::sampling_steps(sched, c.sampler);
    const auto& ev = j.at("eval");
    require(ev.at("grid").size() == 2, "config_invalid", "eval.grid must be [rows, cols]");
    c.eval.grid = {ev.at("grid")[0].get<std::size_t>(), ev.at("grid")[1].get<std::size_t>()};
    c.eval.length_bins = ev.at("length_bins").get<std::size_t>();
    require(c.eval.grid.rows > 0 && c.eval.grid.cols > 0 && c.eval.length_bins > 0, "config_invalid",
            "eval grid and length_bins must be positive");
    return c;
  } catch (const json::exception& e) {
    throw Error("config_invalid", std::string("config: ") + e.what());
  }
}

inline RunConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), "io_error", "cannot read config " + path.string());
  json j;
  try {
    j = json::parse(is, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw Error("config_invalid", path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

/// 16 hex digits of FNV-1a over the canonical JSON of the resolved config.
/// The output directory is excluded so relocating a run keeps its hash.
inline std::string config_hash(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("out");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(synth::fnv1a(j.dump())));
  return buf;
}

}  // namespace ctj::app
