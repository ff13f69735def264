#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctj/diffusion/schedule.hpp"
#include "ctj/error.hpp"
#include "ctj/geo/geometry.hpp"
#include "ctj/geo/io.hpp"
#include "ctj/mae/road_mae.hpp"
#include "ctj/nn/checkpoint.hpp"
#include "ctj/nn/optim.hpp"
#include "ctj/rng.hpp"
#include "ctj/unet/geo_unet.hpp"

namespace ctj::diffusion {

namespace fs = std::filesystem;
using nn::Tensor;

/// 2 x n row-major (lng row, lat row) -> n x 2 interleaved.
inline std::vector<double> to_channels_last(const std::vector<double>& coords) {
  const std::size_t n = coords.size() / 2;
  std::vector<double> out(coords.size());
  for (std::size_t i = 0; i < n; ++i) {
    out[2 * i] = coords[i];
    out[2 * i + 1] = coords[n + i];
  }
  return out;
}

inline std::vector<double> to_rows(const std::vector<double>& interleaved) {
  const std::size_t n = interleaved.size() / 2;
  std::vector<double> out(interleaved.size());
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = interleaved[2 * i];
    out[n + i] = interleaved[2 * i + 1];
  }
  return out;
}

/// Per-sample noise draw for the training objective.
struct NoiseDraw {
  std::size_t t = 1;
  std::vector<double> eps;
};

inline NoiseDraw draw_noise(std::size_t elems, const NoiseSchedule& s, Rng& rng) {
  NoiseDraw d;
  d.t = 1 + static_cast<std::size_t>(rng.below(s.T));
  d.eps.resize(elems);
  for (auto& e : d.eps) e = rng.normal();
  return d;
}

/// Mean squared error between the drawn noise and the model's estimate over
/// a batch; sample i draws (t, eps) from its own generator, so the value does
/// not depend on batch order. `predict(x_t, t, i)` returns the estimate.
inline double training_loss(const std::vector<std::vector<double>>& x0s,
                            const std::function<std::vector<double>(const std::vector<double>&, std::size_t,
                                                                    std::size_t)>& predict,
                            const NoiseSchedule& s, const std::vector<std::uint64_t>& sample_seeds) {
  require(!x0s.empty() && x0s.size() == sample_seeds.size(), "invalid_argument",
          "training_loss needs a non-empty batch with one seed per sample");
  double num = 0.0;
  std::size_t den = 0;
  for (std::size_t i = 0; i < x0s.size(); ++i) {
    Rng rng(sample_seeds[i]);
    const auto d = draw_noise(x0s[i].size(), s, rng);
    const auto eps_hat = predict(forward_noise(x0s[i], d.t, d.eps, s), d.t, i);
    require(eps_hat.size() == d.eps.size(), "shape_mismatch", "noise estimate has the wrong size");
    for (std::size_t k = 0; k < d.eps.size(); ++k) num += (d.eps[k] - eps_hat[k]) * (d.eps[k] - eps_hat[k]);
    den += d.eps.size();
  }
  return num / static_cast<double>(den);
}

/// Differentiable objective for the network: x0[B*n, 2] channels-last, eps of
/// the same size, one step per sample, condition tokens c.
template <class T>
Tensor<T> training_loss(const unet::GeoUNet<T>& net, const std::vector<T>& x0, const std::vector<std::size_t>& steps,
                        const std::vector<T>& eps, const Tensor<T>& c, const NoiseSchedule& s) {
  const std::size_t B = steps.size();
  require(B > 0 && x0.size() == eps.size() && x0.size() % B == 0, "shape_mismatch",
          "training_loss: x0, eps and steps disagree");
  const std::size_t per = x0.size() / B;
  std::vector<T> xt(x0.size());
  for (std::size_t b = 0; b < B; ++b) {
    check_step(s, steps[b]);
    const T a = static_cast<T>(std::sqrt(s.alpha_bar[steps[b]]));
    const T sd = static_cast<T>(std::sqrt(1.0 - s.alpha_bar[steps[b]]));
    for (std::size_t k = b * per; k < (b + 1) * per; ++k) xt[k] = a * x0[k] + sd * eps[k];
  }
  auto pred = net.predict_noise(Tensor<T>::from(x0.size() / 2, 2, std::move(xt)), steps, c);
  return nn::weighted_mse(pred, eps);
}

// ---- training data -------------------------------------------------------------------

/// Everything the diffusion loop consumes, precomputed once. Road tokens come
/// from the frozen RoadMAE under `variants` independent masks per route.
struct TrainingSet {
  std::size_t length = 0;      // n
  std::size_t token_rows = 0;  // N
  std::size_t dim = 0;         // D
  std::size_t variants = 1;
  std::vector<std::vector<float>> x0;        // per trip, n x 2 interleaved
  std::vector<std::vector<float>> features;  // per trip, 6 standardized attributes
  std::vector<std::vector<float>> tokens;    // [variant * trips + trip], N x D

  std::size_t size() const { return x0.size(); }
};

inline TrainingSet build_training_set(const std::vector<geo::Trip>& trips, const mae::RoadMae<float>& road_mae,
                                      std::size_t length, const unet::AttributeStats& stats, double mask_ratio,
                                      std::size_t variants, std::uint64_t seed) {
  require(!trips.empty(), "corpus_empty", "diffusion training needs at least one trip");
  require(variants >= 1, "config_invalid", "mask_variants must be >= 1");
  if (mask_ratio == 0.0) variants = 1;
  const auto& mcfg = road_mae.config();
  TrainingSet set;
  set.length = length;
  set.token_rows = mcfg.patch_count();
  set.dim = mcfg.dim;
  set.variants = variants;
  std::vector<mae::PatchSequence> routes;
  routes.reserve(trips.size());
  for (const auto& trip : trips) {
    const auto track = geo::normalize(geo::resample(trip.traj, length), road_mae.frame);
    const auto cl = to_channels_last(track.coords);
    set.x0.emplace_back(cl.begin(), cl.end());
    const auto f = unet::attribute_features(trip.attrs, stats);
    set.features.emplace_back(f.begin(), f.end());
    routes.push_back(mae::patchify(trip.route, mcfg.route_length, mcfg.patch_length, road_mae.frame));
  }
  nn::NoGradGuard guard;
  constexpr std::size_t chunk = 64;
  set.tokens.resize(variants * trips.size());
  for (std::size_t v = 0; v < variants; ++v) {
    for (std::size_t lo = 0; lo < trips.size(); lo += chunk) {
      const std::size_t hi = std::min(trips.size(), lo + chunk);
      std::vector<mae::PatchSequence> masked;
      for (std::size_t i = lo; i < hi; ++i) {
        Rng rng(derive_seed(seed, {0x70C, v, i}));
        masked.push_back(mae::apply_mask(routes[i], mask_ratio, rng));
      }
      std::vector<const mae::PatchSequence*> batch;
      for (const auto& m : masked) batch.push_back(&m);
      const auto z = road_mae.encode(batch);
      const std::size_t per = set.token_rows * set.dim;
      for (std::size_t i = lo; i < hi; ++i) {
        const auto first = z.values().begin() + static_cast<std::ptrdiff_t>((i - lo) * per);
        set.tokens[v * trips.size() + i].assign(first, first + static_cast<std::ptrdiff_t>(per));
      }
    }
  }
  return set;
}

// ---- checkpoint bundle -------------------------------------------------------------

/// Non-weight contents of a diffusion checkpoint directory.
struct BundleMeta {
  NoiseSchedule schedule;
  geo::BoundingBox frame;
  unet::AttributeStats stats;
  std::string road_mae_ref;  // RoadMAE checkpoint path, relative to the bundle when possible
  std::size_t step = 0;
  json extra = json::object();
};

inline constexpr const char* kBundleKind = "ctj_diffusion";

/// Writes the bundle into `dir` via a sibling temporary directory, so a crash
/// mid-write leaves the previous checkpoint intact.
inline void save_bundle(const fs::path& dir, unet::GeoUNet<float>& net, const BundleMeta& meta,
                        nn::Adam<float>* opt = nullptr, const std::vector<double>* losses = nullptr) {
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  net.save(tmp / "unet");
  if (opt) nn::save_optimizer(tmp / "optimizer", *opt);
  if (losses) {
    std::ofstream os(tmp / "losses.csv");
    os << "step,loss\n";
    for (std::size_t i = 0; i < losses->size(); ++i) os << i + 1 << ',' << geo::format_double((*losses)[i]) << '\n';
  }
  nn::write_json(tmp / "manifest.json", {{"format_version", nn::kCheckpointFormatVersion},
                                         {"kind", kBundleKind},
                                         {"schedule", to_json(meta.schedule)},
                                         {"frame", mae::frame_to_json(meta.frame)},
                                         {"attribute_stats", unet::to_json(meta.stats)},
                                         {"road_mae", meta.road_mae_ref},
                                         {"step", meta.step},
                                         {"extra", meta.extra}});
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

inline BundleMeta read_bundle_meta(const fs::path& dir) {
  const auto m = nn::read_json(dir / "manifest.json");
  require(m.value("kind", "") == kBundleKind, "checkpoint_invalid", dir.string() + " is not a diffusion checkpoint");
  require(m.value("format_version", 0) == nn::kCheckpointFormatVersion, "checkpoint_invalid",
          "unsupported checkpoint format version");
  BundleMeta meta;
  meta.schedule = schedule_from_json(m.at("schedule"));
  meta.frame = mae::frame_from_json(m.at("frame"));
  meta.stats = unet::attribute_stats_from_json(m.at("attribute_stats"));
  meta.road_mae_ref = m.at("road_mae").get<std::string>();
  meta.step = m.at("step").get<std::size_t>();
  meta.extra = m.value("extra", json::object());
  return meta;
}

inline fs::path resolve_road_mae(const fs::path& bundle_dir, const std::string& ref) {
  const fs::path p(ref);
  return p.is_absolute() ? p : bundle_dir / p;
}

inline std::vector<double> read_losses(const fs::path& dir) {
  std::vector<double> out;
  std::ifstream is(dir / "losses.csv");
  if (!is) return out;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    const auto comma = line.find(',');
    if (comma != std::string::npos) out.push_back(geo::parse_double(line.substr(comma + 1), "losses.csv"));
  }
  return out;
}

// ---- training loop ---------------------------------------------------------------------

struct TrainConfig {
  std::size_t steps = 20000;
  std::size_t batch_size = 256;
  double lr = 2e-4;
  double lr_final = -1.0;  // cosine decay target at the last step; < 0 keeps lr constant
  double mask_ratio = 0.5;
  std::size_t mask_variants = 4;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 1000;
  std::size_t log_every = 100;
};

/// One optimizer step's inputs. Everything is a pure function of (seed, step),
/// which is what makes a resumed run continue bit-exactly.
/// Learning rate for 0-based `step`: constant, or cosine from lr to lr_final
/// over cfg.steps. Depends on the step only, so resumed runs match.
inline double learning_rate(const TrainConfig& cfg, std::size_t step) {
  if (cfg.lr_final < 0.0 || cfg.steps <= 1) return cfg.lr;
  const double progress = static_cast<double>(std::min(step, cfg.steps - 1)) / static_cast<double>(cfg.steps - 1);
  return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + std::cos(std::numbers::pi * progress));
}

struct TrainBatch {
  std::vector<float> x0, eps, features, tokens;
  std::vector<std::size_t> steps;
};

inline TrainBatch assemble_batch(const TrainingSet& set, const NoiseSchedule& s, std::size_t batch_size,
                                 std::uint64_t seed, std::size_t step) {
  TrainBatch b;
  Rng pick(derive_seed(seed, {0xD1F, step}));
  for (std::size_t slot = 0; slot < batch_size; ++slot) {
    const auto i = static_cast<std::size_t>(pick.below(set.size()));
    const auto v = static_cast<std::size_t>(pick.below(set.variants));
    Rng rng(derive_seed(seed, {0xD1F, step, slot}));
    const auto d = draw_noise(set.x0[i].size(), s, rng);
    b.steps.push_back(d.t);
    b.x0.insert(b.x0.end(), set.x0[i].begin(), set.x0[i].end());
    for (double e : d.eps) b.eps.push_back(static_cast<float>(e));
    b.features.insert(b.features.end(), set.features[i].begin(), set.features[i].end());
    const auto& tok = set.tokens[v * set.size() + i];
    b.tokens.insert(b.tokens.end(), tok.begin(), tok.end());
  }
  return b;
}

/// c = Concat(z_attr, z_L) per sample, with gradients into the attribute path.
inline Tensor<float> batch_condition(const unet::GeoUNet<float>& net, const TrainBatch& b, std::size_t token_rows,
                                     std::size_t dim) {
  const std::size_t B = b.steps.size();
  auto z_attr = net.attribute_embed(Tensor<float>::from(B, unet::kAttributeFeatures, b.features));
  return net.condition(z_attr, Tensor<float>::from(B * token_rows, dim, b.tokens), B);
}

struct TrainResult {
  std::vector<double> losses;  // one per completed step, including resumed history
  std::size_t start_step = 0;
};

/// Trains `net` to `cfg.steps`, checkpointing into `bundle_dir`. With `resume`
/// and an existing bundle, weights, optimizer state and loss history are
/// restored and the loop continues from the stored step.
inline TrainResult train(unet::GeoUNet<float>& net, const TrainingSet& set, BundleMeta meta, const TrainConfig& cfg,
                         const fs::path& bundle_dir, bool resume,
                         const std::function<void(std::size_t, double)>& on_log = {}) {
  require(cfg.batch_size >= 1, "config_invalid", "batch_size must be >= 1");
  require(set.dim == net.config().context_dim, "config_invalid", "RoadMAE width differs from the UNet context width");
  nn::Adam<float> opt(net.parameters(), {.lr = cfg.lr});
  TrainResult result;
  std::size_t step = 0;
  if (resume && fs::exists(bundle_dir / "manifest.json")) {
    const auto stored = read_bundle_meta(bundle_dir);
    json extra;
    auto loaded = unet::GeoUNet<float>::load(bundle_dir / "unet", &extra);
    const auto src = loaded.parameters();
    const auto dst = net.parameters();
    require(src.size() == dst.size(), "checkpoint_invalid", "resume checkpoint has a different architecture");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      require(src[i].tensor->rows() == dst[i].tensor->rows() && src[i].tensor->cols() == dst[i].tensor->cols(),
              "checkpoint_invalid", "resume checkpoint shape differs at " + dst[i].name);
      dst[i].tensor->values() = src[i].tensor->values();
    }
    nn::load_optimizer(bundle_dir / "optimizer", opt);
    step = stored.step;
    result.losses = read_losses(bundle_dir);
    result.losses.resize(std::min(result.losses.size(), step));
  }
  result.start_step = step;
  auto checkpoint = [&](std::size_t done) {
    meta.step = done;
    save_bundle(bundle_dir, net, meta, &opt, &result.losses);
  };
  std::size_t last_good = step;
  for (; step < cfg.steps; ++step) {
    const auto b = assemble_batch(set, meta.schedule, cfg.batch_size, cfg.seed, step);
    auto diverged = [&](const std::string& what) {
      return Error("diverged", "diffusion training diverged at step " + std::to_string(step + 1) + " (" + what +
                                   "); last good checkpoint is step " + std::to_string(last_good) + " in " +
                                   bundle_dir.string());
    };
    opt.config().lr = learning_rate(cfg, step);
    opt.zero_grad();
    Tensor<float> loss;
    try {
      loss = training_loss(net, b.x0, b.steps, b.eps, batch_condition(net, b, set.token_rows, set.dim),
                           meta.schedule);
    } catch (const Error& e) {
      if (e.code() == "non_finite") throw diverged(e.what());
      throw;
    }
    const double lv = static_cast<double>(loss.item());
    if (!std::isfinite(lv)) throw diverged("non-finite loss");
    loss.backward();
    opt.step();
    result.losses.push_back(lv);
    if (on_log && cfg.log_every && (step + 1) % cfg.log_every == 0) on_log(step + 1, lv);
    if (cfg.checkpoint_every && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps) {
      checkpoint(step + 1);
      last_good = step + 1;
    }
  }
  checkpoint(step);
  return result;
}

}  // namespace ctj::diffusion
