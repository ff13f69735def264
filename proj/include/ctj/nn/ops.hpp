#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "ctj/nn/tensor.hpp"

namespace ctj::nn {

namespace detail {

template <class T>
MatMap<T> grad_map(const Tensor<T>& t) {
  auto* n = t.node();
  return MatMap<T>(n->grad_data(), n->rows, n->cols);
}

template <class T>
MatMap<T> grad_map(Node<T>& n) {
  return MatMap<T>(n.grad_data(), n.rows, n.cols);
}

inline void check(bool cond, const char* what) {
  if (!cond) throw Error("shape_mismatch", what);
}

}  // namespace detail

// ---- linear algebra -----------------------------------------------------------

/// a[m,k] * b[k,n]
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Buffer<T> out(a.rows() * b.cols());
  MatMap<T>(out.data(), a.rows(), b.cols()).noalias() = a.mat() * b.mat();
  return make_result<T>(a.rows(), b.cols(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    auto g = detail::grad_map(self);
    if (a.requires_grad()) detail::grad_map(a).noalias() += g * b.mat().transpose();
    if (b.requires_grad()) detail::grad_map(b).noalias() += a.mat().transpose() * g;
  });
}

/// x[m,in] * w[in,out] + bias[1,out]; `bias` may be undefined.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  detail::check(x.cols() == w.rows(), "linear: input width differs from weight rows");
  const std::size_t m = x.rows(), n = w.cols();
  Buffer<T> out(m * n);
  MatMap<T> o(out.data(), m, n);
  o.noalias() = x.mat() * w.mat();
  if (bias.defined()) {
    detail::check(bias.size() == n, "linear: bias width");
    o.rowwise() += bias.mat().row(0);
  }
  return make_result<T>(m, n, std::move(out), {x, w, bias}, [x, w, bias](Node<T>& self) {
    auto g = detail::grad_map(self);
    if (x.requires_grad()) detail::grad_map(x).noalias() += g * w.mat().transpose();
    if (w.requires_grad()) detail::grad_map(w).noalias() += x.mat().transpose() * g;
    if (bias.requires_grad()) detail::grad_map(bias).row(0) += g.colwise().sum();
  });
}

// ---- elementwise --------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shapes differ");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result<T>(a.rows(), a.cols(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    auto g = detail::grad_map(self);
    if (a.requires_grad()) detail::grad_map(a) += g;
    if (b.requires_grad()) detail::grad_map(b) += g;
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shapes differ");
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result<T>(a.rows(), a.cols(), std::move(out), {a, b}, [a, b](Node<T>& self) {
    auto g = detail::grad_map(self);
    if (a.requires_grad()) detail::grad_map(a) += g;
    if (b.requires_grad()) detail::grad_map(b) -= g;
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Buffer<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return make_result<T>(a.rows(), a.cols(), std::move(out), {a}, [a, s](Node<T>& self) {
    detail::grad_map(a) += s * detail::grad_map(self);
  });
}

/// x[R, C] + p[P, C] where row r of x takes row (r mod P) of p.
template <class T>
Tensor<T> add_tiled(const Tensor<T>& x, const Tensor<T>& p) {
  detail::check(x.cols() == p.cols() && p.rows() > 0 && x.rows() % p.rows() == 0, "add_tiled: shapes");
  const std::size_t R = x.rows(), C = x.cols(), P = p.rows();
  Buffer<T> out(x.values());
  for (std::size_t r = 0; r < R; ++r) {
    const T* pr = p.data() + (r % P) * C;
    T* o = out.data() + r * C;
    for (std::size_t c = 0; c < C; ++c) o[c] += pr[c];
  }
  return make_result<T>(R, C, std::move(out), {x, p}, [x, p, R, C, P](Node<T>& self) {
    const T* g = self.grad.data();
    if (x.requires_grad()) detail::grad_map(x) += detail::grad_map(self);
    if (p.requires_grad()) {
      T* gp = p.node()->grad_data();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) gp[(r % P) * C + c] += g[r * C + c];
    }
  });
}

/// x[B*L, C] + y[B, C]: each block of L rows receives its sample's row of y.
template <class T>
Tensor<T> add_per_sample(const Tensor<T>& x, const Tensor<T>& y, std::size_t len) {
  detail::check(x.cols() == y.cols() && x.rows() == y.rows() * len, "add_per_sample: shapes");
  const std::size_t R = x.rows(), C = x.cols();
  Buffer<T> out(x.values());
  for (std::size_t r = 0; r < R; ++r) {
    const T* yr = y.data() + (r / len) * C;
    T* o = out.data() + r * C;
    for (std::size_t c = 0; c < C; ++c) o[c] += yr[c];
  }
  return make_result<T>(R, C, std::move(out), {x, y}, [x, y, len, R, C](Node<T>& self) {
    const T* g = self.grad.data();
    if (x.requires_grad()) detail::grad_map(x) += detail::grad_map(self);
    if (y.requires_grad()) {
      T* gy = y.node()->grad_data();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) gy[(r / len) * C + c] += g[r * C + c];
    }
  });
}

/// Row r of x scaled by the constant mask[r].
template <class T>
Tensor<T> mask_rows(const Tensor<T>& x, const std::vector<T>& mask) {
  detail::check(mask.size() == x.rows(), "mask_rows: mask length");
  const std::size_t C = x.cols();
  Buffer<T> out(x.values());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] *= mask[r];
  return make_result<T>(x.rows(), C, std::move(out), {x}, [x, mask, C](Node<T>& self) {
    T* gx = x.node()->grad_data();
    for (std::size_t r = 0; r < x.rows(); ++r)
      for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += mask[r] * self.grad[r * C + c];
  });
}

/// x * m + token * (1 - m), row-wise, with token[1, C] shared by every row.
template <class T>
Tensor<T> mask_merge(const Tensor<T>& x, const Tensor<T>& token, const std::vector<T>& mask) {
  detail::check(mask.size() == x.rows() && token.rows() == 1 && token.cols() == x.cols(), "mask_merge: shapes");
  const std::size_t C = x.cols();
  Buffer<T> out(x.size());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < C; ++c)
      out[r * C + c] = x.data()[r * C + c] * mask[r] + token.data()[c] * (T(1) - mask[r]);
  return make_result<T>(x.rows(), C, std::move(out), {x, token}, [x, token, mask, C](Node<T>& self) {
    const T* g = self.grad.data();
    if (x.requires_grad()) {
      T* gx = x.node()->grad_data();
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += mask[r] * g[r * C + c];
    }
    if (token.requires_grad()) {
      T* gt = token.node()->grad_data();
      for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < C; ++c) gt[c] += (T(1) - mask[r]) * g[r * C + c];
    }
  });
}

// ---- activations --------------------------------------------------------------

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  Buffer<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x.data()[i]);
  return make_result<T>(x.rows(), x.cols(), std::move(out), {x}, [x, df](Node<T>& self) {
    T* gx = x.node()->grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i] * df(x.data()[i]);
  });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T v) {
        const T s = T(1) / (T(1) + std::exp(-v));
        return s * (T(1) + v * (T(1) - s));
      });
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(1) / std::sqrt(T(2));
  const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return unary(
      x, [=](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [=](T v) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

// ---- normalization ------------------------------------------------------------

/// Per-row normalization with affine gamma/beta [1, C].
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t R = x.rows(), C = x.cols();
  detail::check(gamma.size() == C && beta.size() == C, "layer_norm: affine width");
  Buffer<T> out(x.size()), xhat(x.size()), rstd(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* xr = x.data() + r * C;
    T mean = 0, var = 0;
    for (std::size_t c = 0; c < C; ++c) mean += xr[c];
    mean /= T(C);
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= T(C);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < C; ++c) {
      xhat[r * C + c] = (xr[c] - mean) * rstd[r];
      out[r * C + c] = xhat[r * C + c] * gamma.data()[c] + beta.data()[c];
    }
  }
  return make_result<T>(R, C, std::move(out), {x, gamma, beta},
                        [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), R, C](Node<T>& self) {
                          const T* g = self.grad.data();
                          if (gamma.requires_grad() || beta.requires_grad()) {
                            T* gg = gamma.node()->grad_data();
                            T* gb = beta.node()->grad_data();
                            for (std::size_t r = 0; r < R; ++r)
                              for (std::size_t c = 0; c < C; ++c) {
                                gg[c] += g[r * C + c] * xhat[r * C + c];
                                gb[c] += g[r * C + c];
                              }
                          }
                          if (!x.requires_grad()) return;
                          T* gx = x.node()->grad_data();
                          Buffer<T> dxhat(C);
                          for (std::size_t r = 0; r < R; ++r) {
                            T m1 = 0, m2 = 0;
                            for (std::size_t c = 0; c < C; ++c) {
                              dxhat[c] = g[r * C + c] * gamma.data()[c];
                              m1 += dxhat[c];
                              m2 += dxhat[c] * xhat[r * C + c];
                            }
                            m1 /= T(C);
                            m2 /= T(C);
                            for (std::size_t c = 0; c < C; ++c)
                              gx[r * C + c] += rstd[r] * (dxhat[c] - m1 - xhat[r * C + c] * m2);
                          }
                        });
}

/// Group normalization over x[B*L, C]: statistics per (sample, channel group)
/// across all L positions.
template <class T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::size_t batch,
                     std::size_t groups, T eps = T(1e-5)) {
  const std::size_t C = x.cols();
  detail::check(batch > 0 && x.rows() % batch == 0, "group_norm: rows not divisible by batch");
  detail::check(groups > 0 && C % groups == 0, "group_norm: channels not divisible by groups");
  detail::check(gamma.size() == C && beta.size() == C, "group_norm: affine width");
  const std::size_t L = x.rows() / batch, gs = C / groups;
  const T count = T(L * gs);
  std::vector<std::size_t> gidx(C);
  for (std::size_t c = 0; c < C; ++c) gidx[c] = c / gs;
  Buffer<T> out(x.size()), xhat(x.size()), rstd(batch * groups);
  Buffer<T> mean(groups), var(groups);
  const T* gm = gamma.data();
  const T* bt = beta.data();
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xb = x.data() + b * L * C;
    std::fill(mean.begin(), mean.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < C; ++c) mean[gidx[c]] += xb[l * C + c];
    for (auto& m : mean) m /= count;
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t c = 0; c < C; ++c) {
        const T d = xb[l * C + c] - mean[gidx[c]];
        var[gidx[c]] += d * d;
      }
    T* rs = rstd.data() + b * groups;
    for (std::size_t gi = 0; gi < groups; ++gi) rs[gi] = T(1) / std::sqrt(var[gi] / count + eps);
    T* xh = xhat.data() + b * L * C;
    T* o = out.data() + b * L * C;
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t i = l * C + c;
        xh[i] = (xb[i] - mean[gidx[c]]) * rs[gidx[c]];
        o[i] = xh[i] * gm[c] + bt[c];
      }
    }
  }
  return make_result<T>(
      x.rows(), C, std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd), gidx = std::move(gidx), batch, groups, L,
       C, count](Node<T>& self) {
        const T* g = self.grad.data();
        if (gamma.requires_grad() || beta.requires_grad()) {
          T* gg = gamma.node()->grad_data();
          T* gb = beta.node()->grad_data();
          for (std::size_t r = 0; r < x.rows(); ++r)
            for (std::size_t c = 0; c < C; ++c) {
              gg[c] += g[r * C + c] * xhat[r * C + c];
              gb[c] += g[r * C + c];
            }
        }
        if (!x.requires_grad()) return;
        T* gx = x.node()->grad_data();
        const T* gm = gamma.data();
        Buffer<T> m1(groups), m2(groups);
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t off = b * L * C;
          std::fill(m1.begin(), m1.end(), T(0));
          std::fill(m2.begin(), m2.end(), T(0));
          for (std::size_t l = 0; l < L; ++l)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t i = off + l * C + c;
              const T d = g[i] * gm[c];
              m1[gidx[c]] += d;
              m2[gidx[c]] += d * xhat[i];
            }
          for (std::size_t gi = 0; gi < groups; ++gi) {
            m1[gi] /= count;
            m2[gi] /= count;
          }
          const T* rs = rstd.data() + b * groups;
          for (std::size_t l = 0; l < L; ++l)
            for (std::size_t c = 0; c < C; ++c) {
              const std::size_t i = off + l * C + c;
              const std::size_t gi = gidx[c];
              gx[i] += rs[gi] * (g[i] * gm[c] - m1[gi] - xhat[i] * m2[gi]);
            }
        }
      });
}

// ---- attention ----------------------------------------------------------------

/// Optional sink for the softmax matrices of an attention call, laid out as
/// [batch][head] blocks of Lq x Lk (row-major).
template <class T>
struct AttentionProbe {
  std::vector<T> probs;
  std::size_t batch = 0, heads = 0, lq = 0, lk = 0;
};

/// Multi-head scaled dot-product attention. q[B*Lq, D], k/v[B*Lk, D]; heads
/// split D into equal slices.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t batch,
                    std::size_t heads, AttentionProbe<T>* probe = nullptr) {
  const std::size_t D = q.cols();
  detail::check(k.cols() == D && v.cols() == D, "attention: widths differ");
  detail::check(heads > 0 && D % heads == 0, "attention: width not divisible by heads");
  detail::check(q.rows() % batch == 0 && k.rows() % batch == 0 && v.rows() == k.rows(), "attention: rows");
  const std::size_t Lq = q.rows() / batch, Lk = k.rows() / batch, dh = D / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  using Stride = Eigen::OuterStride<>;
  using CBlock = Eigen::Map<const RowMat<T>, 0, Stride>;
  using Block = Eigen::Map<RowMat<T>, 0, Stride>;

  Buffer<T> out(q.rows() * D);
  Buffer<T> probs(batch * heads * Lq * Lk);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      CBlock Q(q.data() + b * Lq * D + h * dh, Lq, dh, Stride(D));
      CBlock K(k.data() + b * Lk * D + h * dh, Lk, dh, Stride(D));
      CBlock V(v.data() + b * Lk * D + h * dh, Lk, dh, Stride(D));
      MatMap<T> P(probs.data() + (b * heads + h) * Lq * Lk, Lq, Lk);
      P.noalias() = (Q * K.transpose()) * sc;
      for (std::size_t i = 0; i < Lq; ++i) {
        auto row = P.row(i);
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }
      Block O(out.data() + b * Lq * D + h * dh, Lq, dh, Stride(D));
      O.noalias() = P * V;
    }
  }
  if (probe) {
    probe->probs.assign(probs.begin(), probs.end());
    probe->batch = batch;
    probe->heads = heads;
    probe->lq = Lq;
    probe->lk = Lk;
  }
  return make_result<T>(
      q.rows(), D, std::move(out), {q, k, v},
      [q, k, v, probs = std::move(probs), batch, heads, Lq, Lk, dh, D, sc](Node<T>& self) {
        RowMat<T> dP(Lq, Lk), dS(Lq, Lk);
        T* gq = q.requires_grad() ? q.node()->grad_data() : nullptr;
        T* gk = k.requires_grad() ? k.node()->grad_data() : nullptr;
        T* gv = v.requires_grad() ? v.node()->grad_data() : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            CBlock Q(q.data() + b * Lq * D + h * dh, Lq, dh, Stride(D));
            CBlock K(k.data() + b * Lk * D + h * dh, Lk, dh, Stride(D));
            CBlock V(v.data() + b * Lk * D + h * dh, Lk, dh, Stride(D));
            CBlock dO(self.grad.data() + b * Lq * D + h * dh, Lq, dh, Stride(D));
            ConstMatMap<T> P(probs.data() + (b * heads + h) * Lq * Lk, Lq, Lk);
            if (gv) {
              Block dV(gv + b * Lk * D + h * dh, Lk, dh, Stride(D));
              dV.noalias() += P.transpose() * dO;
            }
            if (!gq && !gk) continue;
            dP.noalias() = dO * V.transpose();
            for (std::size_t i = 0; i < Lq; ++i) {
              const T dot = (dP.row(i).array() * P.row(i).array()).sum();
              dS.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)) * sc;
            }
            if (gq) {
              Block dQ(gq + b * Lq * D + h * dh, Lq, dh, Stride(D));
              dQ.noalias() += dS * K;
            }
            if (gk) {
              Block dK(gk + b * Lk * D + h * dh, Lk, dh, Stride(D));
              dK.noalias() += dS.transpose() * Q;
            }
          }
        }
      });
}

// ---- sequence ops over x[B*L, C] ------------------------------------------------

/// Columns [k*C, (k+1)*C) of row (b, l) hold x at position l + k - K/2 (zero
/// outside the sequence): the patch matrix of a same-padded 1-D convolution.
template <class T>
Tensor<T> im2col(const Tensor<T>& x, std::size_t batch, std::size_t kernel) {
  detail::check(batch > 0 && x.rows() % batch == 0, "im2col: rows not divisible by batch");
  const std::size_t L = x.rows() / batch, C = x.cols(), half = kernel / 2;
  Buffer<T> out(x.rows() * kernel * C, T(0));
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t kk = 0; kk < kernel; ++kk) {
        const long src = static_cast<long>(l) + static_cast<long>(kk) - static_cast<long>(half);
        if (src < 0 || src >= static_cast<long>(L)) continue;
        std::copy_n(x.data() + (b * L + src) * C, C, out.data() + (b * L + l) * kernel * C + kk * C);
      }
  return make_result<T>(x.rows(), kernel * C, std::move(out), {x}, [x, batch, kernel, L, C, half](Node<T>& self) {
    T* gx = x.node()->grad_data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t kk = 0; kk < kernel; ++kk) {
          const long src = static_cast<long>(l) + static_cast<long>(kk) - static_cast<long>(half);
          if (src < 0 || src >= static_cast<long>(L)) continue;
          const T* g = self.grad.data() + (b * L + l) * kernel * C + kk * C;
          T* d = gx + (b * L + src) * C;
          for (std::size_t c = 0; c < C; ++c) d[c] += g[c];
        }
  });
}

/// Max over adjacent position pairs; L must be even.
template <class T>
Tensor<T> max_pool2(const Tensor<T>& x, std::size_t batch) {
  detail::check(batch > 0 && x.rows() % batch == 0 && (x.rows() / batch) % 2 == 0, "max_pool2: odd length");
  const std::size_t L = x.rows() / batch, C = x.cols(), Lo = L / 2;
  Buffer<T> out(batch * Lo * C);
  std::vector<std::uint32_t> arg(out.size());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t l = 0; l < Lo; ++l)
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t i0 = (b * L + 2 * l) * C + c, i1 = i0 + C;
        const bool second = x.data()[i1] > x.data()[i0];
        out[(b * Lo + l) * C + c] = second ? x.data()[i1] : x.data()[i0];
        arg[(b * Lo + l) * C + c] = static_cast<std::uint32_t>(second ? i1 : i0);
      }
  return make_result<T>(batch * Lo, C, std::move(out), {x}, [x, arg = std::move(arg)](Node<T>& self) {
    T* gx = x.node()->grad_data();
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += self.grad[i];
  });
}

/// Doubles the length by linear interpolation (half-pixel centers, edges
/// clamped).
template <class T>
Tensor<T> upsample2(const Tensor<T>& x, std::size_t batch) {
  detail::check(batch > 0 && x.rows() % batch == 0, "upsample2: rows not divisible by batch");
  const std::size_t L = x.rows() / batch, C = x.cols(), Lo = 2 * L;
  struct Tap {
    std::size_t i0, i1;
    T w1;
  };
  std::vector<Tap> taps(Lo);
  for (std::size_t o = 0; o < Lo; ++o) {
    T src = (T(o) + T(0.5)) / T(2) - T(0.5);
    if (src < T(0)) src = T(0);
    auto i0 = static_cast<std::size_t>(src);
    if (i0 > L - 1) i0 = L - 1;
    const std::size_t i1 = std::min(i0 + 1, L - 1);
    taps[o] = {i0, i1, src - T(i0)};
  }
  Buffer<T> out(batch * Lo * C);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t o = 0; o < Lo; ++o) {
      const auto& tp = taps[o];
      const T* a = x.data() + (b * L + tp.i0) * C;
      const T* c1 = x.data() + (b * L + tp.i1) * C;
      T* dst = out.data() + (b * Lo + o) * C;
      for (std::size_t c = 0; c < C; ++c) dst[c] = (T(1) - tp.w1) * a[c] + tp.w1 * c1[c];
    }
  return make_result<T>(batch * Lo, C, std::move(out), {x}, [x, taps, batch, L, Lo, C](Node<T>& self) {
    T* gx = x.node()->grad_data();
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t o = 0; o < Lo; ++o) {
        const auto& tp = taps[o];
        const T* g = self.grad.data() + (b * Lo + o) * C;
        T* d0 = gx + (b * L + tp.i0) * C;
        T* d1 = gx + (b * L + tp.i1) * C;
        for (std::size_t c = 0; c < C; ++c) {
          d0[c] += (T(1) - tp.w1) * g[c];
          d1[c] += tp.w1 * g[c];
        }
      }
  });
}

/// [a | b] along columns.
template <class T>
Tensor<T> concat_cols(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.rows() == b.rows(), "concat_cols: row counts differ");
  const std::size_t R = a.rows(), Ca = a.cols(), Cb = b.cols(), C = Ca + Cb;
  Buffer<T> out(R * C);
  for (std::size_t r = 0; r < R; ++r) {
    std::copy_n(a.data() + r * Ca, Ca, out.data() + r * C);
    std::copy_n(b.data() + r * Cb, Cb, out.data() + r * C + Ca);
  }
  return make_result<T>(R, C, std::move(out), {a, b}, [a, b, R, Ca, Cb, C](Node<T>& self) {
    if (a.requires_grad()) {
      T* ga = a.node()->grad_data();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < Ca; ++c) ga[r * Ca + c] += self.grad[r * C + c];
    }
    if (b.requires_grad()) {
      T* gb = b.node()->grad_data();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < Cb; ++c) gb[r * Cb + c] += self.grad[r * C + Ca + c];
    }
  });
}

/// Per-sample token concatenation: a[B*La, D] and b[B*Lb, D] into
/// [B*(La+Lb), D] with each sample's a-tokens first.
template <class T>
Tensor<T> concat_tokens(const Tensor<T>& a, const Tensor<T>& b, std::size_t batch) {
  detail::check(a.cols() == b.cols() && a.rows() % batch == 0 && b.rows() % batch == 0, "concat_tokens: shapes");
  const std::size_t D = a.cols(), La = a.rows() / batch, Lb = b.rows() / batch, L = La + Lb;
  Buffer<T> out(batch * L * D);
  for (std::size_t s = 0; s < batch; ++s) {
    std::copy_n(a.data() + s * La * D, La * D, out.data() + s * L * D);
    std::copy_n(b.data() + s * Lb * D, Lb * D, out.data() + (s * L + La) * D);
  }
  return make_result<T>(batch * L, D, std::move(out), {a, b}, [a, b, batch, La, Lb, L, D](Node<T>& self) {
    for (std::size_t s = 0; s < batch; ++s) {
      if (a.requires_grad()) {
        T* ga = a.node()->grad_data() + s * La * D;
        const T* g = self.grad.data() + s * L * D;
        for (std::size_t i = 0; i < La * D; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.node()->grad_data() + s * Lb * D;
        const T* g = self.grad.data() + (s * L + La) * D;
        for (std::size_t i = 0; i < Lb * D; ++i) gb[i] += g[i];
      }
    }
  });
}

/// Same values viewed with a new row/column split.
template <class T>
Tensor<T> reshape(const Tensor<T>& x, std::size_t rows, std::size_t cols) {
  detail::check(rows * cols == x.size(), "reshape: element count");
  return make_result<T>(rows, cols, x.values(), {x}, [x](Node<T>& self) {
    T* gx = x.node()->grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
  });
}

// ---- losses -------------------------------------------------------------------

/// sum(w * (pred - target)^2) / sum(w) with constant target and weights
/// (weights empty = all ones).
template <class T>
Tensor<T> weighted_mse(const Tensor<T>& pred, const std::vector<T>& target, const std::vector<T>& weights = {}) {
  detail::check(target.size() == pred.size(), "weighted_mse: target size");
  detail::check(weights.empty() || weights.size() == pred.size(), "weighted_mse: weight size");
  T num = 0, den = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const T w = weights.empty() ? T(1) : weights[i];
    const T d = pred.data()[i] - target[i];
    num += w * d * d;
    den += w;
  }
  require(den > T(0), "loss_undefined", "loss has no contributing elements");
  return make_result<T>(1, 1, {num / den}, {pred}, [pred, target, weights, den](Node<T>& self) {
    T* gp = pred.node()->grad_data();
    const T g = self.grad[0] * T(2) / den;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const T w = weights.empty() ? T(1) : weights[i];
      gp[i] += g * w * (pred.data()[i] - target[i]);
    }
  });
}

/// Sum of all entries.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (auto v : x.values()) s += v;
  return make_result<T>(1, 1, {s}, {x}, [x](Node<T>& self) {
    T* gx = x.node()->grad_data();
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += self.grad[0];
  });
}

template <class T>
Tensor<T> sum_squares(const Tensor<T>& x) {
  T s = 0;
  for (auto v : x.values()) s += v * v;
  return make_result<T>(1, 1, {s}, {x}, [x](Node<T>& self) {
    T* gx = x.node()->grad_data();
    for (std::size_t i = 0; i < x.size(); ++i) gx[i] += T(2) * x.data()[i] * self.grad[0];
  });
}

}  // namespace ctj::nn
