#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctj/error.hpp"
#include "ctj/rng.hpp"

namespace ctj::diffusion {

using json = nlohmann::json;

/// Linear-beta noise schedule. Tables are indexed by step t in [0, T]; entry 0
/// is the clean state (beta 0, alpha_bar 1). alpha_t is stored as the step
/// ratio of the cumulative table, so alpha_bar_t / alpha_bar_{t-1} == alpha_t
/// holds bit for bit.
struct NoiseSchedule {
  std::size_t T = 0;
  double beta_1 = 0.0;
  double beta_T = 0.0;
  std::vector<double> beta, alpha, alpha_bar, tilde_beta;

  double sigma(std::size_t t) const { return std::sqrt(tilde_beta[t]); }
};

inline NoiseSchedule build_schedule(std::size_t T = 500, double beta_1 = 1e-4, double beta_T = 0.05) {
  require(T >= 2, "schedule_invalid", "diffusion needs T >= 2");
  require(beta_1 > 0.0 && beta_1 < beta_T && beta_T < 1.0, "schedule_invalid", "need 0 < beta_1 < beta_T < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_1 = beta_1;
  s.beta_T = beta_T;
  s.beta.assign(T + 1, 0.0);
  s.alpha.assign(T + 1, 1.0);
  s.alpha_bar.assign(T + 1, 1.0);
  s.tilde_beta.assign(T + 1, 0.0);
  for (std::size_t t = 1; t <= T; ++t) {
    s.beta[t] = beta_1 + static_cast<double>(t - 1) * (beta_T - beta_1) / static_cast<double>(T - 1);
    s.alpha_bar[t] = s.alpha_bar[t - 1] * (1.0 - s.beta[t]);
    s.alpha[t] = s.alpha_bar[t] / s.alpha_bar[t - 1];  // 1 - beta_t to within one ulp
    s.tilde_beta[t] = t == 1 ? s.beta[1] : (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t];
  }
  return s;
}

inline json to_json(const NoiseSchedule& s) { return {{"T", s.T}, {"beta_1", s.beta_1}, {"beta_T", s.beta_T}}; }

inline NoiseSchedule schedule_from_json(const json& j) {
  return build_schedule(j.at("T").get<std::size_t>(), j.at("beta_1").get<double>(), j.at("beta_T").get<double>());
}

inline void check_step(const NoiseSchedule& s, std::size_t t) {
  require(t >= 1 && t <= s.T, "invalid_argument",
          "diffusion step " + std::to_string(t) + " outside [1, " + std::to_string(s.T) + "]");
}

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.
inline std::vector<double> forward_noise(const std::vector<double>& x0, std::size_t t, const std::vector<double>& eps,
                                         const NoiseSchedule& s) {
  check_step(s, t);
  require(x0.size() == eps.size(), "shape_mismatch", "forward_noise: x0 and eps differ in size");
  const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
  std::vector<double> xt(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) xt[i] = a * x0[i] + b * eps[i];
  return xt;
}

/// x0-hat = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t).
inline std::vector<double> predict_x0(const std::vector<double>& xt, std::size_t t, const std::vector<double>& eps,
                                      const NoiseSchedule& s) {
  check_step(s, t);
  const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
  std::vector<double> x0(xt.size());
  for (std::size_t i = 0; i < xt.size(); ++i) x0[i] = (xt[i] - b * eps[i]) / a;
  return x0;
}

/// mu = (x_t - beta_t / sqrt(1 - abar_t) eps) / sqrt(alpha_t).
inline std::vector<double> reverse_mean(const std::vector<double>& xt, std::size_t t, const std::vector<double>& eps,
                                        const NoiseSchedule& s) {
  check_step(s, t);
  const double k = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
  const double inv = 1.0 / std::sqrt(s.alpha[t]);
  std::vector<double> mu(xt.size());
  for (std::size_t i = 0; i < xt.size(); ++i) mu[i] = inv * (xt[i] - k * eps[i]);
  return mu;
}

/// One ancestral step x_t -> x_{t-1} = mu + sigma_t z; the final step (t = 1)
/// returns the mean.
inline std::vector<double> reverse_step(const std::vector<double>& xt, std::size_t t, const std::vector<double>& eps,
                                        const NoiseSchedule& s, Rng& rng) {
  auto mu = reverse_mean(xt, t, eps, s);
  if (t == 1) return mu;
  const double sigma = s.sigma(t);
  for (auto& v : mu) v += sigma * rng.normal();
  return mu;
}

/// Deterministic (eta = 0) jump x_t -> x_{t_prev}; t_prev = 0 yields x0-hat.
inline std::vector<double> ddim_step(const std::vector<double>& xt, std::size_t t, std::size_t t_prev,
                                     const std::vector<double>& eps, const NoiseSchedule& s) {
  require(t_prev < t, "invalid_argument", "ddim_step needs t_prev < t");
  auto x0 = predict_x0(xt, t, eps, s);
  const double a = std::sqrt(s.alpha_bar[t_prev]), b = std::sqrt(1.0 - s.alpha_bar[t_prev]);
  for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = a * x0[i] + b * eps[i];
  return x0;
}

enum class SamplerMode { ancestral, ddim };

inline std::string to_string(SamplerMode m) { return m == SamplerMode::ancestral ? "ancestral" : "ddim"; }

inline SamplerMode sampler_mode_from_string(const std::string& s) {
  if (s == "ancestral") return SamplerMode::ancestral;
  if (s == "ddim") return SamplerMode::ddim;
  throw Error("config_invalid", "sampler mode must be \"ancestral\" or \"ddim\", got \"" + s + "\"");
}

struct SamplerConfig {
  SamplerMode mode = SamplerMode::ddim;
  std::size_t skip = 5;  // S; ancestral mode always uses stride 1
  std::uint64_t seed = 0;
  bool clip_x0 = true;  // clamp x0-hat to [-1, 1] each step and re-derive eps from it
};

/// Steps visited by the sampler: T, T-S, ..., S (ddim) or T, ..., 1.
inline std::vector<std::size_t> sampling_steps(const NoiseSchedule& s, const SamplerConfig& cfg) {
  const std::size_t stride = cfg.mode == SamplerMode::ancestral ? 1 : cfg.skip;
  require(stride >= 1 && s.T % stride == 0, "config_invalid", "skip stride must divide T");
  std::vector<std::size_t> steps;
  for (std::size_t t = s.T; t >= stride; t -= stride) {
    steps.push_back(t);
    if (t == stride) break;
  }
  return steps;
}

/// Replaces eps by the noise implied by x_t and clamp(x0-hat, -1, 1). Leaves
/// eps unchanged whenever x0-hat already lies in [-1, 1].
inline void clip_eps(const std::vector<double>& xt, std::size_t t, std::vector<double>& eps, const NoiseSchedule& s) {
  const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
  for (std::size_t i = 0; i < xt.size(); ++i) {
    const double x0 = (xt[i] - b * eps[i]) / a;
    if (x0 > 1.0 || x0 < -1.0) eps[i] = (xt[i] - a * std::clamp(x0, -1.0, 1.0)) / b;
  }
}

/// Noise predictor over a batch laid out as one flat vector, called with the
/// current step.
using EpsPredictor = std::function<std::vector<double>(const std::vector<double>& xt, std::size_t t)>;

/// Runs the reverse process from x_T (given) to a clean sample, clamped to
/// [-1, 1]. With `sample_seeds`, x splits evenly into one block per seed and
/// block k draws its step-t noise from (seeds[k], t); otherwise a single
/// stream from cfg.seed covers x. `on_x0` sees every intermediate x0-hat.
inline std::vector<double> run_sampler(std::vector<double> x, const EpsPredictor& predict, const NoiseSchedule& s,
                                       const SamplerConfig& cfg, const std::vector<std::uint64_t>& sample_seeds = {},
                                       const std::function<void(const std::vector<double>&)>& on_x0 = {}) {
  const auto steps = sampling_steps(s, cfg);
  const std::size_t blocks = sample_seeds.empty() ? 1 : sample_seeds.size();
  require(x.size() % blocks == 0, "shape_mismatch", "sample block count does not divide x");
  const std::size_t per = x.size() / blocks;
  for (std::size_t k = 0; k < steps.size(); ++k) {
    const std::size_t t = steps[k];
    auto eps = predict(x, t);
    require(eps.size() == x.size(), "shape_mismatch", "noise predictor returned the wrong size");
    if (cfg.clip_x0) clip_eps(x, t, eps, s);
    if (on_x0) on_x0(predict_x0(x, t, eps, s));
    if (cfg.mode == SamplerMode::ancestral) {
      x = reverse_mean(x, t, eps, s);
      if (t > 1) {
        const double sigma = s.sigma(t);
        for (std::size_t b = 0; b < blocks; ++b) {
          Rng rng(derive_seed(sample_seeds.empty() ? cfg.seed : sample_seeds[b], {0x5A4D, t}));
          for (std::size_t i = b * per; i < (b + 1) * per; ++i) x[i] += sigma * rng.normal();
        }
      }
    } else {
      x = ddim_step(x, t, k + 1 < steps.size() ? steps[k + 1] : 0, eps, s);
    }
    for (double v : x)
      require(std::isfinite(v), "non_finite", "sampler produced non-finite values at step " + std::to_string(t));
  }
  for (auto& v : x) v = std::clamp(v, -1.0, 1.0);
  return x;
}

}  // namespace ctj::diffusion
