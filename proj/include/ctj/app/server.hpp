#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <utility>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ctj/app/commands.hpp"
#include "ctj/diffusion/pipeline.hpp"
#include "ctj/error.hpp"
#include "ctj/eval/metrics.hpp"
#include "ctj/mae/road_mae.hpp"
#include "ctj/rng.hpp"

namespace ctj::app {

struct HttpResult {
  int status = 200;
  json body;
};

inline int status_for(const std::string& code) {
  if (code == "route_invalid" || code == "request_invalid" || code == "attributes_invalid" ||
      code == "invalid_argument" || code == "frame_mismatch")
    return 400;
  return 500;
}

inline HttpResult error_result(const std::string& code, const std::string& message) {
  return {status_for(code), {{"code", code}, {"message", message}}};
}

/// Endpoint logic over one immutable loaded model. Handlers are safe to run
/// concurrently; each request owns its RNG streams.
class GenerationService {
 public:
  GenerationService(diffusion::TrajectoryGenerator gen, json network, std::string config_hash,
                    diffusion::SamplerConfig sampler, std::uint64_t seed = 0)
      : gen_(std::move(gen)),
        network_(std::move(network)),
        config_hash_(std::move(config_hash)),
        sampler_(sampler),
        seed_(seed) {}

  /// Loads the checkpoint and the world network of a run directory.
  static GenerationService from_run(const RunConfig& cfg, const std::optional<fs::path>& checkpoint = std::nullopt) {
    const fs::path out(cfg.out);
    auto gen = diffusion::TrajectoryGenerator::load(checkpoint.value_or(out / layout::kDiffusion));
    auto network = geo::read_json_file((out / layout::kWorld).string());
    std::string hash = gen.meta.extra.value("config_hash", config_hash(cfg));
    return GenerationService(std::move(gen), std::move(network), std::move(hash), cfg.sampler, cfg.seed);
  }

  const diffusion::TrajectoryGenerator& generator() const { return gen_; }

  HttpResult health() const {
    return {200, {{"status", "ok"}, {"frame", mae::frame_to_json(gen_.frame())}, {"config_hash", config_hash_}}};
  }

  HttpResult network() const { return {200, network_}; }

  HttpResult generate(const std::string& body_text) const {
    try {
      json body;
      try {
        body = json::parse(body_text);
      } catch (const json::parse_error& e) {
        return error_result("request_invalid", std::string("body is not valid JSON: ") + e.what());
      }
      auto parsed = parse_generation_request(body, gen_.meta.stats.median);
      if (!parsed.has_seed) parsed.request.seed = derive_seed(seed_, {0x5E7, next_request_++});
      const auto trajs = gen_.generate(parsed.request, sampler_);
      json out = json::array();
      for (const auto& t : trajs) {
        json pts = json::array();
        for (const auto& p : t.points) pts.push_back({p.lng, p.lat, p.t});
        out.push_back(std::move(pts));
      }
      return {200,
              {{"trajectories", std::move(out)},
               {"adherence_m", eval::route_adherence(trajs, parsed.request.route)},
               {"seed", parsed.request.seed},
               {"sampler", sampler_json(sampler_)}}};
    } catch (const Error& e) {
      return error_result(e.code(), e.what());
    } catch (const std::exception& e) {
      return error_result("internal", e.what());
    }
  }

 private:
  diffusion::TrajectoryGenerator gen_;
  json network_;
  std::string config_hash_;
  diffusion::SamplerConfig sampler_;
  std::uint64_t seed_;
  mutable std::atomic<std::uint64_t> next_request_{0};
};

inline void reply(httplib::Response& res, const HttpResult& r) {
  res.status = r.status;
  res.set_content(r.body.dump(), "application/json");
}

/// Registers the /api routes of `svc` on `server`. `svc` must outlive it.
inline void mount(httplib::Server& server, const GenerationService& svc) {
  server.Get("/api/health", [&svc](const httplib::Request&, httplib::Response& res) { reply(res, svc.health()); });
  server.Get("/api/network", [&svc](const httplib::Request&, httplib::Response& res) { reply(res, svc.network()); });
  server.Post("/api/generate",
              [&svc](const httplib::Request& req, httplib::Response& res) { reply(res, svc.generate(req.body)); });
  server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      const auto code = res.status == 404 ? "not_found" : "http_error";
      res.set_content(json{{"code", code}, {"message", "HTTP " + std::to_string(res.status)}}.dump(),
                      "application/json");
    }
  });
}

/// Blocks serving `svc` on host:port.
inline void cmd_serve(const GenerationService& svc, const std::string& host, int port, const Log& log = stderr_log()) {
  httplib::Server server;
  mount(server, svc);
  log("serve: listening on http://" + host + ":" + std::to_string(port));
  require(server.listen(host, port), "io_error", "cannot listen on " + host + ":" + std::to_string(port));
}

}  // namespace ctj::app
