#pragma once

#include <cmath>
#include <vector>

#include "ctj/nn/layers.hpp"

namespace ctj::nn {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables
};

/// Adaptive-moment optimizer over a fixed parameter list. Moments are kept
/// in double regardless of the parameter scalar.
template <class T>
class Adam {
 public:
  Adam() = default;
  Adam(ParamList<T> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].tensor->size(), 0.0);
      v_[i].assign(params_[i].tensor->size(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& p : params_) {
      auto& g = p.tensor->grad();
      std::fill(g.begin(), g.end(), T(0));
    }
  }

  double grad_norm() {
    double s = 0.0;
    for (auto& p : params_)
      for (auto g : p.tensor->grad()) s += static_cast<double>(g) * static_cast<double>(g);
    return std::sqrt(s);
  }

  /// Applies one update; returns the pre-clip gradient norm.
  double step() {
    const double norm = grad_norm();
    const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& w = params_[i].tensor->values();
      auto& g = params_[i].tensor->grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = static_cast<double>(g[j]) * clip;
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        const double upd = cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - upd);
      }
    }
    return norm;
  }

  std::uint64_t steps() const { return t_; }
  void set_steps(std::uint64_t t) { t_ = t; }
  AdamConfig& config() { return cfg_; }
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  const ParamList<T>& params() const { return params_; }

 private:
  ParamList<T> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace ctj::nn
