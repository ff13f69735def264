#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctj/error.hpp"
#include "ctj/geo/geometry.hpp"
#include "ctj/geo/types.hpp"
#include "ctj/nn/checkpoint.hpp"
#include "ctj/nn/layers.hpp"
#include "ctj/nn/optim.hpp"
#include "ctj/rng.hpp"

namespace ctj::mae {

using json = nlohmann::json;
using nn::Tensor;

struct RoadMaeConfig {
  std::size_t route_length = 200;  // points per resampled route
  std::size_t patch_length = 5;    // points per patch
  std::size_t dim = 128;
  std::size_t heads = 4;
  std::size_t encoder_blocks = 8;
  std::size_t decoder_blocks = 4;
  double mask_ratio = 0.5;

  std::size_t patch_count() const { return (route_length + patch_length - 1) / patch_length; }
  std::size_t patch_width() const { return 2 * patch_length; }
};

inline void validate(const RoadMaeConfig& c) {
  require(c.route_length >= 2, "config_invalid", "route_length must be >= 2");
  require(c.patch_length >= 1, "config_invalid", "patch_length must be >= 1");
  require(c.dim > 0 && c.heads > 0 && c.dim % c.heads == 0, "config_invalid",
          "road_mae dim must be divisible by heads");
  require(c.mask_ratio >= 0.0 && c.mask_ratio < 1.0, "config_invalid", "mask_ratio must be in [0, 1)");
}

inline json to_json(const RoadMaeConfig& c) {
  return {{"route_length", c.route_length}, {"patch_length", c.patch_length}, {"dim", c.dim},
          {"heads", c.heads},  {"encoder_blocks", c.encoder_blocks}, {"decoder_blocks", c.decoder_blocks},
          {"mask_ratio", c.mask_ratio}};
}

inline RoadMaeConfig road_mae_config_from_json(const json& j) {
  RoadMaeConfig c;
  c.route_length = j.at("route_length").get<std::size_t>();
  c.patch_length = j.at("patch_length").get<std::size_t>();
  c.dim = j.at("dim").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.encoder_blocks = j.at("encoder_blocks").get<std::size_t>();
  c.decoder_blocks = j.at("decoder_blocks").get<std::size_t>();
  c.mask_ratio = j.at("mask_ratio").get<double>();
  validate(c);
  return c;
}

inline json frame_to_json(const geo::BoundingBox& f) {
  return {{"lng_min", f.lng_min}, {"lng_max", f.lng_max}, {"lat_min", f.lat_min}, {"lat_max", f.lat_max}};
}

inline geo::BoundingBox frame_from_json(const json& j) {
  geo::BoundingBox f{j.at("lng_min").get<double>(), j.at("lng_max").get<double>(), j.at("lat_min").get<double>(),
                     j.at("lat_max").get<double>()};
  geo::validate(f);
  return f;
}

/// A route cut into N patches of P points. Each patch row is the interleaved
/// (lng, lat) sequence of its points in normalized units, zero-padded at the
/// tail; `valid` marks real (non-padding) entries.
struct PatchSequence {
  std::size_t count = 0;         // N
  std::size_t patch_length = 0;  // P
  std::size_t route_length = 0;  // L_r
  std::vector<double> patches;   // N x 2P
  std::vector<double> valid;     // N x 2P
  std::vector<double> mask;      // N; 1 = visible, 0 = masked
  double mask_ratio = 0.0;
  geo::BoundingBox frame;

  std::size_t width() const { return 2 * patch_length; }
  std::size_t masked_count() const {
    return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 0.0));
  }
};

/// Packs an already-normalized 2 x L track (row 0 lng, row 1 lat).
inline PatchSequence pack_patches(const std::vector<double>& coords, std::size_t length, std::size_t patch_length) {
  require(length >= 1 && coords.size() == 2 * length, "route_invalid", "empty route");
  require(patch_length >= 1, "config_invalid", "patch_length must be >= 1");
  PatchSequence seq;
  seq.patch_length = patch_length;
  seq.route_length = length;
  seq.count = (length + patch_length - 1) / patch_length;
  const std::size_t w = seq.width();
  seq.patches.assign(seq.count * w, 0.0);
  seq.valid.assign(seq.count * w, 0.0);
  for (std::size_t i = 0; i < length; ++i) {
    const std::size_t p = i / patch_length, k = i % patch_length;
    seq.patches[p * w + 2 * k] = coords[i];
    seq.patches[p * w + 2 * k + 1] = coords[length + i];
    seq.valid[p * w + 2 * k] = 1.0;
    seq.valid[p * w + 2 * k + 1] = 1.0;
  }
  seq.mask.assign(seq.count, 1.0);
  return seq;
}

/// Inverse of pack_patches on an N x 2P matrix; returns 2 x L (row-major).
inline std::vector<double> unpatchify(const std::vector<double>& patches, std::size_t patch_length,
                                      std::size_t length) {
  const std::size_t w = 2 * patch_length;
  const std::size_t n = (length + patch_length - 1) / patch_length;
  require(patches.size() == n * w, "shape_mismatch", "patch matrix does not match route length");
  std::vector<double> out(2 * length);
  for (std::size_t i = 0; i < length; ++i) {
    const std::size_t p = i / patch_length, k = i % patch_length;
    out[i] = patches[p * w + 2 * k];
    out[length + i] = patches[p * w + 2 * k + 1];
  }
  return out;
}

/// Resamples the route to L_r points, normalizes it into `frame` and packs
/// patches (mask all visible).
inline PatchSequence patchify(const geo::RoutePolyline& route, std::size_t route_length, std::size_t patch_length,
                              const geo::BoundingBox& frame) {
  require(!route.vertices.empty(), "route_invalid", "empty route");
  const auto resampled = geo::resample(route, route_length);
  const auto track = geo::normalize(resampled, frame);
  auto seq = pack_patches(track.coords, route_length, patch_length);
  seq.frame = frame;
  return seq;
}

/// Masks exactly floor(ratio * N) patches chosen uniformly without replacement.
inline PatchSequence apply_mask(PatchSequence seq, double ratio, Rng& rng) {
  require(ratio >= 0.0 && ratio < 1.0, "invalid_argument", "mask ratio must be in [0, 1)");
  const auto n_masked = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(seq.count)));
  std::vector<std::size_t> idx(seq.count);
  std::iota(idx.begin(), idx.end(), 0);
  seq.mask.assign(seq.count, 1.0);
  for (std::size_t i = 0; i < n_masked; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.below(seq.count - i));
    std::swap(idx[i], idx[j]);
    seq.mask[idx[i]] = 0.0;
  }
  seq.mask_ratio = ratio;
  return seq;
}

/// Per-element loss weights: masked patches only, padding excluded.
inline std::vector<double> masked_weights(const PatchSequence& seq) {
  std::vector<double> w(seq.valid);
  const std::size_t width = seq.width();
  for (std::size_t p = 0; p < seq.count; ++p)
    for (std::size_t c = 0; c < width; ++c) w[p * width + c] *= (1.0 - seq.mask[p]);
  return w;
}

/// Encoder output tokens z_L (N x D) for one route.
struct RoadEmbedding {
  std::size_t count = 0;
  std::size_t dim = 0;
  std::vector<double> tokens;
  geo::BoundingBox frame;
};

/// Masked road-segment autoencoder: linear patch embedding plus learned
/// positions, a pre-norm transformer encoder, mask-token merge, a transformer
/// decoder and a linear head back to patch coordinates.
template <class T>
class RoadMae {
 public:
  RoadMae() = default;
  RoadMae(const RoadMaeConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg_);
    Rng rng(derive_seed(seed, {0x3AE}));
    const auto n = cfg_.patch_count(), d = cfg_.dim;
    patch_embed_ = nn::Linear<T>(cfg_.patch_width(), d, rng);
    pos_enc_ = normal_param(n, d, 0.02, rng);
    for (std::size_t i = 0; i < cfg_.encoder_blocks; ++i) encoder_.emplace_back(d, cfg_.heads, rng);
    mask_token_ = normal_param(1, d, 0.02, rng);
    pos_dec_ = normal_param(n, d, 0.02, rng);
    for (std::size_t i = 0; i < cfg_.decoder_blocks; ++i) decoder_.emplace_back(d, cfg_.heads, rng);
    head_ = nn::Linear<T>(d, cfg_.patch_width(), rng);
  }

  const RoadMaeConfig& config() const { return cfg_; }
  geo::BoundingBox frame;

  nn::ParamList<T> parameters() {
    nn::ParamList<T> out;
    patch_embed_.collect("embed", out);
    out.push_back({"pos_enc", &pos_enc_});
    for (std::size_t i = 0; i < encoder_.size(); ++i) encoder_[i].collect("encoder." + std::to_string(i), out);
    out.push_back({"mask_token", &mask_token_});
    out.push_back({"pos_dec", &pos_dec_});
    for (std::size_t i = 0; i < decoder_.size(); ++i) decoder_[i].collect("decoder." + std::to_string(i), out);
    head_.collect("head", out);
    return out;
  }

  Tensor<T>& mask_token() { return mask_token_; }
  std::vector<nn::TransformerBlock<T>>& encoder_blocks() { return encoder_; }
  std::vector<nn::TransformerBlock<T>>& decoder_blocks() { return decoder_; }

  /// Raw patch rows [B*N, 2P] for a batch.
  Tensor<T> patch_matrix(const std::vector<const PatchSequence*>& batch) const {
    const std::size_t n = cfg_.patch_count(), w = cfg_.patch_width();
    std::vector<T> v;
    v.reserve(batch.size() * n * w);
    for (const auto* s : batch) {
      check_sequence(*s);
      for (double x : s->patches) v.push_back(static_cast<T>(x));
    }
    return Tensor<T>::from(batch.size() * n, w, std::move(v));
  }

  static std::vector<T> mask_vector(const std::vector<const PatchSequence*>& batch) {
    std::vector<T> m;
    for (const auto* s : batch)
      for (double x : s->mask) m.push_back(static_cast<T>(x));
    return m;
  }

  /// z0 = Embed(Patch(r)) + E_pos.
  Tensor<T> embed(const Tensor<T>& patches) const { return nn::add_tiled(patch_embed_(patches), pos_enc_); }

  /// z1 = z0 * M, then the encoder stack. Throws on non-finite activations.
  Tensor<T> encode(const std::vector<const PatchSequence*>& batch,
                   std::vector<nn::AttentionProbe<T>>* probes = nullptr) const {
    auto z = nn::mask_rows(embed(patch_matrix(batch)), mask_vector(batch));
    if (probes) probes->assign(encoder_.size(), {});
    for (std::size_t i = 0; i < encoder_.size(); ++i) {
      z = encoder_[i](z, batch.size(), probes ? &(*probes)[i] : nullptr);
      require(nn::all_finite(z), "non_finite", "non-finite activations in encoder block " + std::to_string(i));
    }
    return z;
  }

  /// z'_L = z_L * M + E_tmp * (1 - M), decoder positions, decoder stack, head.
  /// Returns reconstructed patch rows [B*N, 2P].
  Tensor<T> decode(const Tensor<T>& z, const std::vector<T>& mask, std::size_t batch) const {
    require(z.rows() == batch * cfg_.patch_count() && z.cols() == cfg_.dim && mask.size() == z.rows(),
            "shape_mismatch", "decode: embedding or mask shape mismatch");
    auto h = nn::add_tiled(nn::mask_merge(z, mask_token_, mask), pos_dec_);
    for (std::size_t i = 0; i < decoder_.size(); ++i) {
      h = decoder_[i](h, batch);
      require(nn::all_finite(h), "non_finite", "non-finite activations in decoder block " + std::to_string(i));
    }
    return head_(h);
  }

  Tensor<T> reconstruct(const std::vector<const PatchSequence*>& batch) const {
    return decode(encode(batch), mask_vector(batch), batch.size());
  }

  /// Mean squared reconstruction error over masked, non-padding entries.
  Tensor<T> ssl_loss(const std::vector<const PatchSequence*>& batch, const Tensor<T>& recon) const {
    std::vector<T> target, weights;
    for (const auto* s : batch) {
      const auto w = masked_weights(*s);
      for (std::size_t i = 0; i < w.size(); ++i) {
        target.push_back(static_cast<T>(s->patches[i]));
        weights.push_back(static_cast<T>(w[i]));
      }
    }
    require(std::any_of(weights.begin(), weights.end(), [](T w) { return w > T(0); }), "loss_undefined",
            "loss undefined at r_o=0");
    return nn::weighted_mse(recon, target, weights);
  }

  /// Inference: z_L for one route with its own mask.
  RoadEmbedding embed_route(const PatchSequence& seq) const {
    nn::NoGradGuard guard;
    auto z = encode({&seq});
    RoadEmbedding e;
    e.count = cfg_.patch_count();
    e.dim = cfg_.dim;
    e.tokens.assign(z.values().begin(), z.values().end());
    e.frame = seq.frame;
    return e;
  }

  void save(const std::filesystem::path& dir, const json& extra = json::object()) {
    json manifest = {{"format_version", nn::kCheckpointFormatVersion},
                     {"kind", "road_mae"},
                     {"config", to_json(cfg_)},
                     {"frame", frame_to_json(frame)}};
    manifest["tensors"] = nn::save_params(dir, parameters());
    manifest["extra"] = extra;
    nn::write_json(dir / "manifest.json", manifest);
  }

  static RoadMae load(const std::filesystem::path& dir, json* extra = nullptr) {
    const auto manifest = nn::read_json(dir / "manifest.json");
    require(manifest.value("kind", "") == "road_mae", "checkpoint_invalid", "not a road_mae checkpoint");
    require(manifest.value("format_version", 0) == nn::kCheckpointFormatVersion, "checkpoint_invalid",
            "unsupported checkpoint format version");
    RoadMae m(road_mae_config_from_json(manifest.at("config")), 0);
    m.frame = frame_from_json(manifest.at("frame"));
    nn::load_params(dir, manifest.at("tensors"), m.parameters());
    require(nn::params_finite(m.parameters()), "checkpoint_invalid", "road_mae checkpoint has non-finite weights");
    if (extra) *extra = manifest.value("extra", json::object());
    return m;
  }

 private:
  static Tensor<T> normal_param(std::size_t r, std::size_t c, double std, Rng& rng) {
    std::vector<T> v(r * c);
    for (auto& x : v) x = static_cast<T>(std * rng.normal());
    return Tensor<T>::parameter(r, c, std::move(v));
  }

  void check_sequence(const PatchSequence& s) const {
    require(s.count == cfg_.patch_count() && s.patch_length == cfg_.patch_length, "shape_mismatch",
            "patch sequence does not match model configuration");
  }

  RoadMaeConfig cfg_;
  nn::Linear<T> patch_embed_;
  Tensor<T> pos_enc_;
  std::vector<nn::TransformerBlock<T>> encoder_;
  Tensor<T> mask_token_;
  Tensor<T> pos_dec_;
  std::vector<nn::TransformerBlock<T>> decoder_;
  nn::Linear<T> head_;
};

struct PretrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 256;
  std::size_t max_steps = 0;  // 0 = run all epochs
  double lr = 1e-4;
  double mask_ratio = 0.5;
  std::uint64_t seed = 0;
  std::size_t log_every = 50;
};

struct PretrainLog {
  std::vector<double> losses;  // one per step
  std::size_t steps = 0;
};

/// Self-supervised reconstruction training on `routes` (already patchified,
/// all visible). Each step draws fresh masks from derive_seed(seed, {step, i}).
template <class T>
PretrainLog pretrain(RoadMae<T>& model, const std::vector<PatchSequence>& routes, const PretrainConfig& cfg,
                     const std::function<void(std::size_t, double)>& on_log = {}) {
  require(!routes.empty(), "corpus_empty", "pretraining needs at least one route");
  nn::Adam<T> opt(model.parameters(), {.lr = cfg.lr});
  PretrainLog log;
  const std::size_t bs = std::min(cfg.batch_size, routes.size());
  const std::size_t per_epoch = (routes.size() + bs - 1) / bs;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(routes.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle(derive_seed(cfg.seed, {0xE90C, epoch}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      if (cfg.max_steps && step >= cfg.max_steps) return log;
      std::vector<PatchSequence> masked;
      for (std::size_t i = b * bs; i < std::min(routes.size(), (b + 1) * bs); ++i) {
        Rng mrng(derive_seed(cfg.seed, {step, i}));
        masked.push_back(apply_mask(routes[order[i]], cfg.mask_ratio, mrng));
      }
      std::vector<const PatchSequence*> batch;
      for (const auto& s : masked) batch.push_back(&s);
      opt.zero_grad();
      auto loss = model.ssl_loss(batch, model.reconstruct(batch));
      const double lv = static_cast<double>(loss.item());
      if (!std::isfinite(lv)) {
        throw Error("diverged", "road_mae loss became non-finite at step " + std::to_string(step) +
                                    " (last finite loss " +
                                    (log.losses.empty() ? std::string("n/a") : std::to_string(log.losses.back())) +
                                    ")");
      }
      loss.backward();
      opt.step();
      log.losses.push_back(lv);
      ++step;
      log.steps = step;
      if (on_log && cfg.log_every && step % cfg.log_every == 0) on_log(step, lv);
    }
  }
  return log;
}

}  // namespace ctj::mae
