#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctj/error.hpp"
#include "ctj/geo/types.hpp"
#include "ctj/nn/checkpoint.hpp"
#include "ctj/nn/layers.hpp"
#include "ctj/rng.hpp"

namespace ctj::unet {

using json = nlohmann::json;
using nn::Tensor;

struct UNetConfig {
  std::size_t length = 200;             // model length n
  std::size_t base_width = 128;         // channels at stage 0
  std::vector<std::size_t> ch_mult{1, 2, 2, 2};  // one entry per sampling block
  std::size_t resnet_blocks = 2;        // per stage
  std::size_t heads = 4;
  std::size_t time_dim = 128;           // sinusoidal width and time-MLP width
  std::size_t context_dim = 128;        // condition token width (RoadMAE dim)
  std::size_t attr_hidden = 128;        // deep-path hidden width
  std::size_t diffusion_steps = 500;    // valid t range for the time embedding

  std::size_t sampling_blocks() const { return ch_mult.size(); }
  std::size_t width(std::size_t stage) const { return base_width * ch_mult[stage]; }
};

inline void validate(const UNetConfig& c) {
  require(!c.ch_mult.empty(), "config_invalid", "ch_mult needs at least one stage");
  require(c.resnet_blocks >= 1, "config_invalid", "resnet_blocks must be >= 1");
  require(c.base_width > 0 && c.time_dim > 0 && c.context_dim > 0 && c.attr_hidden > 0, "config_invalid",
          "widths must be positive");
  require(c.time_dim % 2 == 0, "config_invalid", "time_dim must be even");
  const std::size_t factor = std::size_t{1} << (c.ch_mult.size() - 1);
  require(c.length >= factor && c.length % factor == 0, "config_invalid",
          "model length must be divisible by 2^(sampling_blocks-1)");
  for (std::size_t s = 0; s < c.ch_mult.size(); ++s) {
    require(c.ch_mult[s] > 0, "config_invalid", "ch_mult entries must be positive");
    require(c.width(s) % c.heads == 0, "config_invalid",
            "stage width " + std::to_string(c.width(s)) + " not divisible by " + std::to_string(c.heads) + " heads");
  }
  require(c.diffusion_steps >= 1, "config_invalid", "diffusion_steps must be >= 1");
}

inline json to_json(const UNetConfig& c) {
  return {{"length", c.length},         {"base_width", c.base_width}, {"ch_mult", c.ch_mult},
          {"resnet_blocks", c.resnet_blocks}, {"heads", c.heads},   {"time_dim", c.time_dim},
          {"context_dim", c.context_dim}, {"attr_hidden", c.attr_hidden},
          {"diffusion_steps", c.diffusion_steps}};
}

inline UNetConfig unet_config_from_json(const json& j) {
  UNetConfig c;
  c.length = j.at("length").get<std::size_t>();
  c.base_width = j.at("base_width").get<std::size_t>();
  c.ch_mult = j.at("ch_mult").get<std::vector<std::size_t>>();
  c.resnet_blocks = j.at("resnet_blocks").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.time_dim = j.at("time_dim").get<std::size_t>();
  c.context_dim = j.at("context_dim").get<std::size_t>();
  c.attr_hidden = j.at("attr_hidden").get<std::size_t>();
  c.diffusion_steps = j.at("diffusion_steps").get<std::size_t>();
  validate(c);
  return c;
}

// ---- attribute features ---------------------------------------------------------

/// Corpus mean / standard deviation of the continuous attributes.
struct AttributeStats {
  double travel_time_mean = 0.0, travel_time_std = 1.0;
  double distance_mean = 0.0, distance_std = 1.0;
  double speed_mean = 0.0, speed_std = 1.0;
  geo::TripAttributes median;  // fills partially specified requests
};

inline double median_of(std::vector<double> v) {
  require(!v.empty(), "corpus_empty", "median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline AttributeStats compute_attribute_stats(const std::vector<geo::TripAttributes>& attrs) {
  require(!attrs.empty(), "corpus_empty", "attribute statistics need a non-empty corpus");
  auto moments = [&](auto field, double& mean, double& sd) {
    double s = 0.0, ss = 0.0;
    for (const auto& a : attrs) s += field(a);
    mean = s / static_cast<double>(attrs.size());
    for (const auto& a : attrs) ss += (field(a) - mean) * (field(a) - mean);
    sd = std::sqrt(ss / static_cast<double>(attrs.size()));
    if (!(sd > 0.0)) sd = 1.0;
  };
  AttributeStats st;
  moments([](const geo::TripAttributes& a) { return a.travel_time; }, st.travel_time_mean, st.travel_time_std);
  moments([](const geo::TripAttributes& a) { return a.total_distance; }, st.distance_mean, st.distance_std);
  moments([](const geo::TripAttributes& a) { return a.avg_speed; }, st.speed_mean, st.speed_std);
  std::vector<double> h, tt, d, sp;
  for (const auto& a : attrs) {
    h.push_back(a.departure_time);
    tt.push_back(a.travel_time);
    d.push_back(a.total_distance);
    sp.push_back(a.avg_speed);
  }
  st.median = {median_of(h), median_of(tt), median_of(d), median_of(sp)};
  return st;
}

inline json to_json(const AttributeStats& s) {
  return {{"travel_time", {s.travel_time_mean, s.travel_time_std}},
          {"total_distance", {s.distance_mean, s.distance_std}},
          {"avg_speed", {s.speed_mean, s.speed_std}},
          {"median",
           {{"departure_time", s.median.departure_time},
            {"travel_time", s.median.travel_time},
            {"total_distance", s.median.total_distance},
            {"avg_speed", s.median.avg_speed}}}};
}

inline AttributeStats attribute_stats_from_json(const json& j) {
  AttributeStats s;
  s.travel_time_mean = j.at("travel_time")[0];
  s.travel_time_std = j.at("travel_time")[1];
  s.distance_mean = j.at("total_distance")[0];
  s.distance_std = j.at("total_distance")[1];
  s.speed_mean = j.at("avg_speed")[0];
  s.speed_std = j.at("avg_speed")[1];
  const auto& m = j.at("median");
  s.median = {m.at("departure_time"), m.at("travel_time"), m.at("total_distance"), m.at("avg_speed")};
  return s;
}

inline constexpr std::size_t kAttributeFeatures = 6;

/// [sin, cos of hour, standardized travel time, distance, speed, 1].
inline std::array<double, kAttributeFeatures> attribute_features(const geo::TripAttributes& a,
                                                                 const AttributeStats& s) {
  require(std::isfinite(a.departure_time) && std::isfinite(a.travel_time) && std::isfinite(a.total_distance) &&
              std::isfinite(a.avg_speed),
          "attributes_invalid", "non-finite trip attribute");
  const double ang = 2.0 * std::numbers::pi * a.departure_time / 24.0;
  return {std::sin(ang),
          std::cos(ang),
          (a.travel_time - s.travel_time_mean) / s.travel_time_std,
          (a.total_distance - s.distance_mean) / s.distance_std,
          (a.avg_speed - s.speed_mean) / s.speed_std,
          1.0};
}

/// Fixed sinusoidal code of step t: [sin(t w_k), cos(t w_k)], w_k = 10000^(-k/half).
inline std::vector<double> sinusoidal_embedding(std::size_t t, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> e(dim);
  for (std::size_t k = 0; k < half; ++k) {
    const double w = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
    e[k] = std::sin(static_cast<double>(t) * w);
    e[half + k] = std::cos(static_cast<double>(t) * w);
  }
  return e;
}

// ---- building blocks ----------------------------------------------------------------

/// GN -> SiLU -> conv, time injection, GN -> SiLU -> conv, plus a (projected)
/// skip of the input.
template <class T>
struct ResBlock {
  nn::GroupNorm<T> norm1, norm2;
  nn::Conv1d<T> conv1, conv2;
  nn::Linear<T> time_proj;
  nn::Conv1d<T> skip;  // 1x1, only when widths differ
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(std::size_t cin, std::size_t cout, std::size_t time_dim, Rng& rng)
      : norm1(cin), norm2(cout), conv1(cin, cout, 3, rng), conv2(cout, cout, 3, rng), time_proj(time_dim, cout, rng) {
    if (cin != cout) {
      skip = nn::Conv1d<T>(cin, cout, 1, rng);
      has_skip = true;
    }
  }

  /// x[B*L, cin], temb_act = SiLU(time MLP output) [B, time_dim].
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& temb_act, std::size_t batch) const {
    const std::size_t len = x.rows() / batch;
    auto h = conv1(nn::silu(norm1(x, batch)), batch);
    h = nn::add_per_sample(h, time_proj(temb_act), len);
    h = conv2(nn::silu(norm2(h, batch)), batch);
    return nn::add(h, has_skip ? skip(x, batch) : x);
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) {
    norm1.collect(prefix + ".norm1", out);
    conv1.collect(prefix + ".conv1", out);
    time_proj.collect(prefix + ".time", out);
    norm2.collect(prefix + ".norm2", out);
    conv2.collect(prefix + ".conv2", out);
    if (has_skip) skip.collect(prefix + ".skip", out);
  }
};

/// Diagnostics captured from one geo-attention call.
template <class T>
struct GeoAttentionProbe {
  nn::AttentionProbe<T> self_attn, cross_attn;
  std::vector<T> cross_out;  // stage-2 output before the residual add
};

/// Self-attention over the track features, then cross-attention whose keys
/// and values come from the condition tokens. Each stage is
/// h + W_o Attn(GN(h), ...).
template <class T>
struct GeoAttention {
  nn::GroupNorm<T> norm_self, norm_cross;
  nn::MultiHeadAttention<T> self_attn;   // W_sq, W_sk, W_sv (d x d), W_so
  nn::MultiHeadAttention<T> cross_attn;  // W_cq (d x d), W_ck, W_cv (D -> d), W_co

  GeoAttention() = default;
  GeoAttention(std::size_t width, std::size_t context_dim, std::size_t heads, Rng& rng)
      : norm_self(width),
        norm_cross(width),
        self_attn(width, width, heads, rng),
        cross_attn(width, context_dim, heads, rng) {}

  Tensor<T> operator()(const Tensor<T>& h, const Tensor<T>& context, std::size_t batch,
                       GeoAttentionProbe<T>* probe = nullptr) const {
    auto hs = norm_self(h, batch);
    auto h1 = nn::add(h, self_attn(hs, hs, batch, probe ? &probe->self_attn : nullptr));
    auto cross = cross_attn(norm_cross(h1, batch), context, batch, probe ? &probe->cross_attn : nullptr);
    if (probe) probe->cross_out.assign(cross.values().begin(), cross.values().end());
    return nn::add(h1, cross);
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) {
    norm_self.collect(prefix + ".norm_self", out);
    self_attn.collect(prefix + ".self", out);
    norm_cross.collect(prefix + ".norm_cross", out);
    cross_attn.collect(prefix + ".cross", out);
  }
};

/// Wide & Deep attribute embedding: z_attr = W x + MLP(x), x the 6 features.
template <class T>
struct AttributeEmbedding {
  nn::Linear<T> wide;
  nn::Linear<T> deep1, deep2;

  AttributeEmbedding() = default;
  AttributeEmbedding(std::size_t hidden, std::size_t out, Rng& rng)
      : wide(kAttributeFeatures, out, rng, /*with_bias=*/false),
        deep1(kAttributeFeatures, hidden, rng),
        deep2(hidden, out, rng) {}

  /// features[B, 6] -> [B, out]
  Tensor<T> operator()(const Tensor<T>& features) const {
    return nn::add(wide(features), deep2(nn::relu(deep1(features))));
  }

  void collect(const std::string& prefix, nn::ParamList<T>& out) {
    wide.collect(prefix + ".wide", out);
    deep1.collect(prefix + ".deep1", out);
    deep2.collect(prefix + ".deep2", out);
  }
};

// ---- the network ------------------------------------------------------------------------

/// Conditional noise estimator over tracks laid out channels-last as
/// x[B*n, 2] (column 0 lng, column 1 lat).
template <class T>
class GeoUNet {
 public:
  struct Stage {
    std::vector<ResBlock<T>> res;
    GeoAttention<T> attn;
  };

  GeoUNet() = default;
  GeoUNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    validate(cfg_);
    Rng rng(derive_seed(seed, {0x0E7}));
    const std::size_t S = cfg_.sampling_blocks();
    attr_ = AttributeEmbedding<T>(cfg_.attr_hidden, cfg_.context_dim, rng);
    time1_ = nn::Linear<T>(cfg_.time_dim, cfg_.time_dim, rng);
    time2_ = nn::Linear<T>(cfg_.time_dim, cfg_.time_dim, rng);
    in_conv_ = nn::Conv1d<T>(2, cfg_.width(0), 3, rng);
    std::size_t ch = cfg_.width(0);
    for (std::size_t s = 0; s < S; ++s) {
      Stage st;
      for (std::size_t r = 0; r < cfg_.resnet_blocks; ++r) {
        st.res.emplace_back(ch, cfg_.width(s), cfg_.time_dim, rng);
        ch = cfg_.width(s);
      }
      st.attn = GeoAttention<T>(ch, cfg_.context_dim, cfg_.heads, rng);
      down_.push_back(std::move(st));
    }
    mid1_ = ResBlock<T>(ch, ch, cfg_.time_dim, rng);
    mid_attn_ = GeoAttention<T>(ch, cfg_.context_dim, cfg_.heads, rng);
    mid2_ = ResBlock<T>(ch, ch, cfg_.time_dim, rng);
    for (std::size_t i = 0; i < S; ++i) {
      const std::size_t s = S - 1 - i;
      Stage st;
      std::size_t cin = ch + cfg_.width(s);  // skip concatenation
      for (std::size_t r = 0; r < cfg_.resnet_blocks; ++r) {
        st.res.emplace_back(cin, cfg_.width(s), cfg_.time_dim, rng);
        cin = cfg_.width(s);
      }
      ch = cfg_.width(s);
      st.attn = GeoAttention<T>(ch, cfg_.context_dim, cfg_.heads, rng);
      up_.push_back(std::move(st));
    }
    out_norm_ = nn::GroupNorm<T>(ch);
    out_conv_ = nn::Conv1d<T>(ch, 2, 3, rng);
  }

  const UNetConfig& config() const { return cfg_; }
  std::vector<Stage>& down_stages() { return down_; }
  std::vector<Stage>& up_stages() { return up_; }
  GeoAttention<T>& mid_attention() { return mid_attn_; }

  nn::ParamList<T> parameters() {
    nn::ParamList<T> out;
    attr_.collect("attr", out);
    time1_.collect("time.fc1", out);
    time2_.collect("time.fc2", out);
    in_conv_.collect("in_conv", out);
    for (std::size_t s = 0; s < down_.size(); ++s) collect_stage("down." + std::to_string(s), down_[s], out);
    mid1_.collect("mid.res1", out);
    mid_attn_.collect("mid.attn", out);
    mid2_.collect("mid.res2", out);
    for (std::size_t s = 0; s < up_.size(); ++s) collect_stage("up." + std::to_string(s), up_[s], out);
    out_norm_.collect("out.norm", out);
    out_conv_.collect("out.conv", out);
    return out;
  }

  /// Zeroes every cross-attention output projection; the network then ignores
  /// the condition tokens entirely.
  void zero_cross_attention_outputs() {
    for (auto& s : down_) s.attn.cross_attn.wo.zero();
    mid_attn_.cross_attn.wo.zero();
    for (auto& s : up_) s.attn.cross_attn.wo.zero();
  }

  /// z_attr for a batch of standardized feature rows [B, 6] -> [B, context_dim].
  Tensor<T> attribute_embed(const Tensor<T>& features) const { return attr_(features); }

  Tensor<T> attribute_embed(const std::vector<geo::TripAttributes>& attrs, const AttributeStats& stats) const {
    std::vector<T> f;
    f.reserve(attrs.size() * kAttributeFeatures);
    for (const auto& a : attrs)
      for (double v : attribute_features(a, stats)) f.push_back(static_cast<T>(v));
    return attr_(Tensor<T>::from(attrs.size(), kAttributeFeatures, std::move(f)));
  }

  /// Sinusoidal code of each t followed by the two-layer time MLP: [B, time_dim].
  Tensor<T> timestep_embed(const std::vector<std::size_t>& steps) const {
    std::vector<T> e;
    e.reserve(steps.size() * cfg_.time_dim);
    for (auto t : steps) {
      require(t >= 1 && t <= cfg_.diffusion_steps, "invalid_argument",
              "diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(cfg_.diffusion_steps) + "]");
      for (double v : sinusoidal_embedding(t, cfg_.time_dim)) e.push_back(static_cast<T>(v));
    }
    auto s = Tensor<T>::from(steps.size(), cfg_.time_dim, std::move(e));
    return time2_(nn::silu(time1_(s)));
  }

  /// Condition c = Concat(z_attr, z_L) per sample: [B*(1+N), context_dim].
  Tensor<T> condition(const Tensor<T>& z_attr, const Tensor<T>& road_tokens, std::size_t batch) const {
    require(z_attr.cols() == cfg_.context_dim && road_tokens.cols() == cfg_.context_dim, "shape_mismatch",
            "condition token width differs from the network context width");
    return nn::concat_tokens(z_attr, road_tokens, batch);
  }

  /// epsilon-hat for x_t[B*n, 2] at steps t (one per sample) under condition
  /// tokens c[B*Lc, context_dim].
  Tensor<T> predict_noise(const Tensor<T>& x, const std::vector<std::size_t>& steps, const Tensor<T>& c,
                          std::vector<GeoAttentionProbe<T>>* probes = nullptr) const {
    const std::size_t B = steps.size();
    require(B > 0 && x.cols() == 2 && x.rows() == B * cfg_.length, "shape_mismatch",
            "predict_noise expects x[B*" + std::to_string(cfg_.length) + ", 2]");
    require(c.cols() == cfg_.context_dim && c.rows() % B == 0 && c.rows() > 0, "shape_mismatch",
            "condition tokens do not match the batch");
    if (probes) probes->clear();
    auto probe = [&]() -> GeoAttentionProbe<T>* {
      if (!probes) return nullptr;
      probes->emplace_back();
      return &probes->back();
    };
    const auto temb = nn::silu(timestep_embed(steps));
    auto h = in_conv_(x, B);
    std::vector<Tensor<T>> skips;
    const std::size_t S = down_.size();
    for (std::size_t s = 0; s < S; ++s) {
      for (const auto& rb : down_[s].res) h = rb(h, temb, B);
      h = down_[s].attn(h, c, B, probe());
      check_finite(h, "down", s);
      skips.push_back(h);
      if (s + 1 < S) h = nn::max_pool2(h, B);
    }
    h = mid1_(h, temb, B);
    h = mid_attn_(h, c, B, probe());
    h = mid2_(h, temb, B);
    check_finite(h, "bottleneck", 0);
    for (std::size_t i = 0; i < S; ++i) {
      const std::size_t s = S - 1 - i;
      h = nn::concat_cols(h, skips[s]);
      for (const auto& rb : up_[i].res) h = rb(h, temb, B);
      h = up_[i].attn(h, c, B, probe());
      check_finite(h, "up", s);
      if (s > 0) h = nn::upsample2(h, B);
    }
    return out_conv_(nn::silu(out_norm_(h, B)), B);
  }

  void save(const std::filesystem::path& dir, const json& extra = json::object()) {
    json manifest = {{"format_version", nn::kCheckpointFormatVersion}, {"kind", "geo_unet"}, {"config", to_json(cfg_)}};
    manifest["tensors"] = nn::save_params(dir, parameters());
    manifest["extra"] = extra;
    nn::write_json(dir / "manifest.json", manifest);
  }

  static GeoUNet load(const std::filesystem::path& dir, json* extra = nullptr) {
    const auto manifest = nn::read_json(dir / "manifest.json");
    require(manifest.value("kind", "") == "geo_unet", "checkpoint_invalid", "not a geo_unet checkpoint");
    require(manifest.value("format_version", 0) == nn::kCheckpointFormatVersion, "checkpoint_invalid",
            "unsupported checkpoint format version");
    GeoUNet m(unet_config_from_json(manifest.at("config")), 0);
    nn::load_params(dir, manifest.at("tensors"), m.parameters());
    require(nn::params_finite(m.parameters()), "checkpoint_invalid", "geo_unet checkpoint has non-finite weights");
    if (extra) *extra = manifest.value("extra", json::object());
    return m;
  }

 private:
  static void collect_stage(const std::string& prefix, Stage& st, nn::ParamList<T>& out) {
    for (std::size_t r = 0; r < st.res.size(); ++r) st.res[r].collect(prefix + ".res" + std::to_string(r), out);
    st.attn.collect(prefix + ".attn", out);
  }

  static void check_finite(const Tensor<T>& h, const char* where, std::size_t stage) {
    require(nn::all_finite(h), "non_finite",
            std::string("non-finite activations in ") + where + " stage " + std::to_string(stage));
  }

  UNetConfig cfg_;
  AttributeEmbedding<T> attr_;
  nn::Linear<T> time1_, time2_;
  nn::Conv1d<T> in_conv_;
  std::vector<Stage> down_;
  ResBlock<T> mid1_, mid2_;
  GeoAttention<T> mid_attn_;
  std::vector<Stage> up_;
  nn::GroupNorm<T> out_norm_;
  nn::Conv1d<T> out_conv_;
};

}  // namespace ctj::unet
