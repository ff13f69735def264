#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "ctj/nn/ops.hpp"
#include "ctj/rng.hpp"

namespace ctj::nn {

template <class T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
};

template <class T>
using ParamList = std::vector<ParamRef<T>>;

template <class T>
Tensor<T> uniform_param(std::size_t rows, std::size_t cols, double bound, Rng& rng) {
  std::vector<T> v(rows * cols);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor<T>::parameter(rows, cols, std::move(v));
}

template <class T>
Tensor<T> constant_param(std::size_t rows, std::size_t cols, T value) {
  return Tensor<T>::parameter(rows, cols, std::vector<T>(rows * cols, value));
}

/// y = x W + b with W stored [in, out].
template <class T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = uniform_param<T>(in, out, bound, rng);
    if (with_bias) bias = uniform_param<T>(1, out, bound, rng);
  }

  std::size_t in_features() const { return weight.rows(); }
  std::size_t out_features() const { return weight.cols(); }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".weight", &weight});
    if (bias.defined()) out.push_back({prefix + ".bias", &bias});
  }

  void zero() {
    std::fill(weight.values().begin(), weight.values().end(), T(0));
    if (bias.defined()) std::fill(bias.values().begin(), bias.values().end(), T(0));
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim) : gamma(constant_param<T>(1, dim, T(1))), beta(constant_param<T>(1, dim, T(0))) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
};

/// 32 groups, or one group per channel when there are fewer than 32.
inline std::size_t default_groups(std::size_t channels) {
  if (channels < 32) return channels;
  std::size_t g = 32;
  while (channels % g != 0) --g;
  return g;
}

template <class T>
struct GroupNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  std::size_t groups = 1;

  GroupNorm() = default;
  explicit GroupNorm(std::size_t channels)
      : gamma(constant_param<T>(1, channels, T(1))),
        beta(constant_param<T>(1, channels, T(0))),
        groups(default_groups(channels)) {}

  Tensor<T> operator()(const Tensor<T>& x, std::size_t batch) const {
    return group_norm(x, gamma, beta, batch, groups);
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
};

/// Same-padded 1-D convolution over x[B*L, Cin]; weight is [K*Cin, Cout].
template <class T>
struct Conv1d {
  Linear<T> proj;
  std::size_t kernel = 3;

  Conv1d() = default;
  Conv1d(std::size_t cin, std::size_t cout, std::size_t k, Rng& rng) : proj(k * cin, cout, rng), kernel(k) {}

  Tensor<T> operator()(const Tensor<T>& x, std::size_t batch) const {
    if (kernel == 1) return proj(x);
    return proj(im2col(x, batch, kernel));
  }

  void collect(const std::string& prefix, ParamList<T>& out) { proj.collect(prefix, out); }
};

/// Multi-head attention with separate query-side and key/value-side widths.
template <class T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  std::size_t heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t context_dim, std::size_t n_heads, Rng& rng)
      : wq(dim, dim, rng), wk(context_dim, dim, rng), wv(context_dim, dim, rng), wo(dim, dim, rng), heads(n_heads) {
    require(n_heads > 0 && dim % n_heads == 0, "config_invalid",
            "attention width " + std::to_string(dim) + " not divisible by " + std::to_string(n_heads) + " heads");
  }

  /// Attention output before the output projection.
  Tensor<T> attend(const Tensor<T>& x, const Tensor<T>& context, std::size_t batch,
                   AttentionProbe<T>* probe = nullptr) const {
    return attention(wq(x), wk(context), wv(context), batch, heads, probe);
  }

  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& context, std::size_t batch,
                       AttentionProbe<T>* probe = nullptr) const {
    return wo(attend(x, context, batch, probe));
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    wq.collect(prefix + ".q", out);
    wk.collect(prefix + ".k", out);
    wv.collect(prefix + ".v", out);
    wo.collect(prefix + ".o", out);
  }
};

template <class T>
struct FeedForward {
  Linear<T> fc1, fc2;

  FeedForward() = default;
  FeedForward(std::size_t dim, std::size_t hidden, Rng& rng) : fc1(dim, hidden, rng), fc2(hidden, dim, rng) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }

  void collect(const std::string& prefix, ParamList<T>& out) {
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

/// Pre-norm transformer block over tokens x[B*N, D]:
///   z' = MSA(LN(z)) + z;  z'' = MLP(LN(z')) + z'.
template <class T>
struct TransformerBlock {
  LayerNorm<T> ln1, ln2;
  MultiHeadAttention<T> attn;
  FeedForward<T> mlp;

  TransformerBlock() = default;
  TransformerBlock(std::size_t dim, std::size_t heads, Rng& rng)
      : ln1(dim), ln2(dim), attn(dim, dim, heads, rng), mlp(dim, 4 * dim, rng) {}

  Tensor<T> operator()(const Tensor<T>& z, std::size_t batch, AttentionProbe<T>* probe = nullptr) const {
    auto h = ln1(z);
    auto z1 = add(attn(h, h, batch, probe), z);
    return add(mlp(ln2(z1)), z1);
  }

  void collect(const std::string& prefix, ParamList<T>& out) {
    ln1.collect(prefix + ".ln1", out);
    attn.collect(prefix + ".attn", out);
    ln2.collect(prefix + ".ln2", out);
    mlp.collect(prefix + ".mlp", out);
  }
};

template <class T>
std::size_t parameter_count(const ParamList<T>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor->size();
  return n;
}

}  // namespace ctj::nn
