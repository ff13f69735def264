#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "ctj/diffusion/engine.hpp"
#include "ctj/diffusion/schedule.hpp"
#include "ctj/error.hpp"
#include "ctj/geo/geometry.hpp"
#include "ctj/mae/road_mae.hpp"
#include "ctj/rng.hpp"
#include "ctj/unet/geo_unet.hpp"

namespace ctj::diffusion {

/// Conditioning for one generated track: the (masked) route tokens z_L and
/// the trip attributes.
struct Condition {
  std::vector<float> tokens;  // N x D
  geo::TripAttributes attrs;
};

struct GenerationRequest {
  geo::RoutePolyline route;
  geo::TripAttributes attrs;
  std::size_t count = 1;
  double mask_ratio = 0.0;
  std::uint64_t seed = 0;
};

/// A loaded diffusion checkpoint with its frozen RoadMAE. All generation
/// methods are const and safe to call concurrently.
class TrajectoryGenerator {
 public:
  mae::RoadMae<float> road_mae;
  unet::GeoUNet<float> unet;
  BundleMeta meta;
  std::size_t chunk = 64;  // samples per network call

  TrajectoryGenerator(mae::RoadMae<float> mae_model, unet::GeoUNet<float> net, BundleMeta bundle)
      : road_mae(std::move(mae_model)), unet(std::move(net)), meta(std::move(bundle)) {
    require(road_mae.config().dim == unet.config().context_dim, "checkpoint_invalid",
            "RoadMAE width differs from the UNet context width");
    require(road_mae.frame == meta.frame, "checkpoint_invalid", "RoadMAE and diffusion frames differ");
    require(meta.schedule.T == unet.config().diffusion_steps, "checkpoint_invalid",
            "schedule length differs from the UNet time range");
  }

  static TrajectoryGenerator load(const fs::path& bundle_dir) {
    auto meta = read_bundle_meta(bundle_dir);
    auto net = unet::GeoUNet<float>::load(bundle_dir / "unet");
    auto mae_model = mae::RoadMae<float>::load(resolve_road_mae(bundle_dir, meta.road_mae_ref));
    return TrajectoryGenerator(std::move(mae_model), std::move(net), std::move(meta));
  }

  const geo::BoundingBox& frame() const { return meta.frame; }
  std::size_t length() const { return unet.config().length; }

  /// Rejects routes that are malformed or leave the model frame.
  void check_route(const geo::RoutePolyline& route) const {
    geo::validate(route);
    for (std::size_t i = 0; i < route.size(); ++i) {
      require(meta.frame.contains(route.vertices[i]), "frame_mismatch",
              "route vertex " + std::to_string(i) + " lies outside the model frame");
    }
  }

  /// z_L for `route` with floor(mask_ratio * N) patches masked by `mask_seed`.
  std::vector<float> route_tokens(const geo::RoutePolyline& route, double mask_ratio, std::uint64_t mask_seed) const {
    check_route(route);
    require(mask_ratio >= 0.0 && mask_ratio < 1.0, "invalid_argument", "mask_ratio must be in [0, 1)");
    const auto& c = road_mae.config();
    Rng rng(mask_seed);
    const auto seq = mae::apply_mask(mae::patchify(route, c.route_length, c.patch_length, meta.frame), mask_ratio, rng);
    const auto e = road_mae.embed_route(seq);
    return {e.tokens.begin(), e.tokens.end()};
  }

  /// One normalized track (n x 2 interleaved, clamped to [-1, 1]) per
  /// condition. Sample i starts from x_T drawn with seeds[i] and, in ancestral
  /// mode, injects noise from the same seed.
  std::vector<std::vector<double>> sample(const std::vector<Condition>& conds, const std::vector<std::uint64_t>& seeds,
                                          const SamplerConfig& sampler) const {
    require(conds.size() == seeds.size(), "invalid_argument", "one seed per condition required");
    const std::size_t n = length();
    const std::size_t N = road_mae.config().patch_count();
    const std::size_t D = road_mae.config().dim;
    std::vector<std::vector<double>> out;
    out.reserve(conds.size());
    nn::NoGradGuard guard;
    for (std::size_t lo = 0; lo < conds.size(); lo += chunk) {
      const std::size_t hi = std::min(conds.size(), lo + chunk);
      const std::size_t B = hi - lo;
      std::vector<geo::TripAttributes> attrs;
      std::vector<float> tokens;
      tokens.reserve(B * N * D);
      for (std::size_t i = lo; i < hi; ++i) {
        require(conds[i].tokens.size() == N * D, "shape_mismatch", "route tokens have the wrong size");
        attrs.push_back(conds[i].attrs);
        tokens.insert(tokens.end(), conds[i].tokens.begin(), conds[i].tokens.end());
      }
      const auto c = unet.condition(unet.attribute_embed(attrs, meta.stats),
                                    nn::Tensor<float>::from(B * N, D, std::move(tokens)), B);
      std::vector<double> x(B * n * 2);
      std::vector<std::uint64_t> chunk_seeds(seeds.begin() + static_cast<std::ptrdiff_t>(lo),
                                             seeds.begin() + static_cast<std::ptrdiff_t>(hi));
      for (std::size_t b = 0; b < B; ++b) {
        Rng rng(derive_seed(chunk_seeds[b], {0x7E5}));
        for (std::size_t k = 0; k < n * 2; ++k) x[b * n * 2 + k] = rng.normal();
      }
      const EpsPredictor predict = [&](const std::vector<double>& xt, std::size_t t) {
        std::vector<float> xf(xt.begin(), xt.end());
        const auto eps = unet.predict_noise(nn::Tensor<float>::from(B * n, 2, std::move(xf)),
                                            std::vector<std::size_t>(B, t), c);
        return std::vector<double>(eps.values().begin(), eps.values().end());
      };
      const auto result = run_sampler(std::move(x), predict, meta.schedule, sampler, chunk_seeds);
      for (std::size_t b = 0; b < B; ++b)
        out.emplace_back(result.begin() + static_cast<std::ptrdiff_t>(b * n * 2),
                         result.begin() + static_cast<std::ptrdiff_t>((b + 1) * n * 2));
    }
    return out;
  }

  /// Denormalized, uniformly timestamped trajectory from a sampled track.
  geo::Trajectory to_trajectory(const std::vector<double>& interleaved, const geo::TripAttributes& attrs) const {
    geo::NormalizedTrack track;
    track.coords = to_rows(interleaved);
    track.frame = meta.frame;
    track.timestamps = geo::uniform_timestamps(attrs, length());
    return geo::denormalize(track);
  }

  /// `count` trajectories for one route. The route mask depends only on the
  /// request seed; sample i uses derive_seed(seed, {i}).
  std::vector<geo::Trajectory> generate(const GenerationRequest& req, const SamplerConfig& sampler) const {
    require(req.count <= 1024, "invalid_argument", "count must be at most 1024");
    require(req.mask_ratio >= 0.0 && req.mask_ratio <= 0.75, "invalid_argument", "mask_ratio must be in [0, 0.75]");
    geo::validate(req.attrs);
    if (req.count == 0) return {};
    const Condition cond{route_tokens(req.route, req.mask_ratio, derive_seed(req.seed, {0x3A5C})), req.attrs};
    std::vector<Condition> conds(req.count, cond);
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < req.count; ++i) seeds.push_back(derive_seed(req.seed, {i}));
    std::vector<geo::Trajectory> out;
    for (const auto& s : sample(conds, seeds, sampler)) out.push_back(to_trajectory(s, req.attrs));
    return out;
  }
};

}  // namespace ctj::diffusion
