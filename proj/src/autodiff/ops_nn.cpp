#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "satlab/autodiff.hpp"

namespace satlab::ad {

namespace {

// Below this argument exp() rounds to exactly +0 in type T.
template <typename T>
constexpr T exp_zero_below() {
  return sizeof(T) == 4 ? T(-104) : T(-746);
}

}  // namespace

template <typename T>
Var<T> softmax_lastdim(Var<T> a) {
  const Tensor<T>& x = a.value();
  if (x.rank() == 0) throw ShapeError("softmax_lastdim needs rank >= 1");
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * width;
    T* out = y.data() + r * width;
    const T mx = *std::max_element(in, in + width);
    T total{0};
    for (std::size_t j = 0; j < width; ++j) {
      const T d = in[j] - mx;
      out[j] = d < exp_zero_below<T>() ? T{0} : std::exp(d);
      total += out[j];
    }
    const T inv = T{1} / total;
    for (std::size_t j = 0; j < width; ++j) out[j] *= inv;
  }
  return a.tape->record(OpKind::softmax, std::move(y), {a}, [width, rows](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    const auto& yv = ctx.output();
    auto& gx = ctx.grad_input(0);
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t off = r * width;
      T dot{0};
      for (std::size_t j = 0; j < width; ++j) dot += g[off + j] * yv[off + j];
      for (std::size_t j = 0; j < width; ++j) gx[off + j] += yv[off + j] * (g[off + j] - dot);
    }
  });
}

template <typename T>
Var<T> causal_mask(Var<T> a) {
  const Tensor<T>& x = a.value();
  if (x.rank() < 2 || x.shape()[x.rank() - 1] != x.shape()[x.rank() - 2]) {
    throw ShapeError(fmt::format("causal_mask needs [.., T, T], got {}", to_string(x.shape())));
  }
  const std::size_t t = x.shape().back();
  const std::size_t blocks = x.size() / (t * t);
  constexpr T masked = T(-1e30);
  Tensor<T> y = x;
  for (std::size_t b = 0; b < blocks; ++b) {
    T* blk = y.data() + b * t * t;
    for (std::size_t i = 0; i < t; ++i)
      for (std::size_t j = i + 1; j < t; ++j) blk[i * t + j] = masked;
  }
  return a.tape->record(OpKind::causal_mask, std::move(y), {a}, [t, blocks](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    auto& gx = ctx.grad_input(0);
    for (std::size_t b = 0; b < blocks; ++b)
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = 0; j <= i; ++j) gx[b * t * t + i * t + j] += g[b * t * t + i * t + j];
  });
}

template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> weight, T eps) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  if (xv.rank() == 0 || wv.rank() != 1 || wv.shape()[0] != xv.shape().back()) {
    throw ShapeError(fmt::format("rms_norm: input {} with weight {}", to_string(xv.shape()),
                                 to_string(wv.shape())));
  }
  const std::size_t d = wv.size();
  const std::size_t rows = xv.size() / d;
  Tensor<T> y(xv.shape());
  std::vector<T> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T ss{0};
    for (std::size_t j = 0; j < d; ++j) ss += in[j] * in[j];
    const T inv = T{1} / std::sqrt(ss / T(d) + eps);
    inv_rms[r] = inv;
    T* out = y.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) out[j] = in[j] * inv * wv[j];
  }
  return x.tape->record(OpKind::rms_norm, std::move(y), {x, weight},
                        [d, rows, inv_rms = std::move(inv_rms)](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    const auto& xin = ctx.input(0);
    const auto& w = ctx.input(1);
    Tensor<T>* gx = ctx.needs_grad(0) ? &ctx.grad_input(0) : nullptr;
    Tensor<T>* gw = ctx.needs_grad(1) ? &ctx.grad_input(1) : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t off = r * d;
      const T inv = inv_rms[r];
      if (gw) {
        for (std::size_t j = 0; j < d; ++j) (*gw)[j] += g[off + j] * xin[off + j] * inv;
      }
      if (gx) {
        T dot{0};
        for (std::size_t j = 0; j < d; ++j) dot += g[off + j] * w[j] * xin[off + j];
        const T coef = inv * inv * inv * dot / T(d);
        for (std::size_t j = 0; j < d; ++j) {
          (*gx)[off + j] += inv * g[off + j] * w[j] - coef * xin[off + j];
        }
      }
    }
  });
}

template <typename T>
Var<T> embedding_lookup(Var<T> table, const TokenGrid& ids) {
  const Tensor<T>& tv = table.value();
  if (tv.rank() != 2) throw ShapeError(fmt::format("embedding table must be [V,d], got {}", to_string(tv.shape())));
  const std::size_t vocab = tv.shape()[0];
  const std::size_t d = tv.shape()[1];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = ids.ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw DomainError(fmt::format("token id {} at position (b={}, t={}) outside vocabulary [0,{})", id,
                                    i / ids.length, i % ids.length, vocab));
    }
  }
  Tensor<T> y(Shape{ids.batch, ids.length, d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.data() + static_cast<std::size_t>(ids.ids[i]) * d, d, y.data() + i * d);
  }
  return table.tape->record(OpKind::embedding, std::move(y), {table}, [ids = ids.ids, d](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    auto& gt = ctx.grad_input(0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      T* row = gt.data() + static_cast<std::size_t>(ids[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += g[i * d + j];
    }
  });
}

template <typename T>
Var<T> cross_entropy_mean(Var<T> logits, const TokenGrid& targets) {
  const Tensor<T>& x = logits.value();
  if (x.rank() < 2) throw ShapeError("cross_entropy_mean needs [.., V] logits");
  const std::size_t vocab = x.shape().back();
  const std::size_t rows = x.size() / vocab;
  if (rows != targets.size()) {
    throw ShapeError(fmt::format("cross_entropy_mean: {} logit rows vs {} targets", rows, targets.size()));
  }
  for (std::size_t i = 0; i < rows; ++i) {
    const auto t = targets.ids[i];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw DomainError(fmt::format("target {} at row {} outside [0,{})", t, i, vocab));
    }
  }
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * vocab;
    const double mx = static_cast<double>(*std::max_element(in, in + vocab));
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) s += std::exp(static_cast<double>(in[j]) - mx);
    total += mx + std::log(s) - static_cast<double>(in[targets.ids[r]]);
  }
  const T loss = static_cast<T>(total / static_cast<double>(rows));
  return logits.tape->record(OpKind::cross_entropy, Tensor<T>::scalar(loss), {logits},
                             [tg = targets.ids, vocab, rows](BackwardContext<T>& ctx) {
    const T g = ctx.grad_output()[0] / T(rows);
    const auto& xin = ctx.input(0);
    auto& gx = ctx.grad_input(0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = xin.data() + r * vocab;
      T* out = gx.data() + r * vocab;
      const T mx = *std::max_element(in, in + vocab);
      T s{0};
      for (std::size_t j = 0; j < vocab; ++j) s += std::exp(in[j] - mx);
      const T inv = T{1} / s;
      for (std::size_t j = 0; j < vocab; ++j) out[j] += g * std::exp(in[j] - mx) * inv;
      out[tg[r]] -= g;
    }
  });
}

template <typename T>
Var<T> rope_apply(Var<T> x, std::span<const std::size_t> positions, double theta_base) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 4) throw ShapeError(fmt::format("rope_apply needs [B,T,H,d_head], got {}", to_string(xv.shape())));
  const std::size_t batch = xv.shape()[0];
  const std::size_t len = xv.shape()[1];
  const std::size_t heads = xv.shape()[2];
  const std::size_t dh = xv.shape()[3];
  if (dh % 2 != 0) throw ShapeError(fmt::format("rope_apply needs even d_head, got {}", dh));
  if (positions.size() != len) {
    throw ShapeError(fmt::format("rope_apply: {} positions for sequence length {}", positions.size(), len));
  }
  const std::size_t half = dh / 2;
  std::vector<T> cosv(len * half);
  std::vector<T> sinv(len * half);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      const double angle = static_cast<double>(positions[t]) * freq;
      cosv[t * half + i] = static_cast<T>(std::cos(angle));
      sinv[t * half + i] = static_cast<T>(std::sin(angle));
    }
  }
  Tensor<T> y(xv.shape());
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < len; ++t)
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = ((b * len + t) * heads + h) * dh;
        for (std::size_t i = 0; i < half; ++i) {
          const T c = cosv[t * half + i];
          const T s = sinv[t * half + i];
          const T x0 = xv[off + 2 * i];
          const T x1 = xv[off + 2 * i + 1];
          y[off + 2 * i] = x0 * c - x1 * s;
          y[off + 2 * i + 1] = x0 * s + x1 * c;
        }
      }
  return x.tape->record(OpKind::rope, std::move(y), {x},
                        [cosv = std::move(cosv), sinv = std::move(sinv), batch, len, heads, dh, half](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    auto& gx = ctx.grad_input(0);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < len; ++t)
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = ((b * len + t) * heads + h) * dh;
          for (std::size_t i = 0; i < half; ++i) {
            const T c = cosv[t * half + i];
            const T s = sinv[t * half + i];
            const T g0 = g[off + 2 * i];
            const T g1 = g[off + 2 * i + 1];
            gx[off + 2 * i] += g0 * c + g1 * s;
            gx[off + 2 * i + 1] += -g0 * s + g1 * c;
          }
        }
  });
}

#define SATLAB_INSTANTIATE(T)                                                        \
  template Var<T> softmax_lastdim(Var<T>);                                           \
  template Var<T> causal_mask(Var<T>);                                               \
  template Var<T> rms_norm(Var<T>, Var<T>, T);                                       \
  template Var<T> embedding_lookup(Var<T>, const TokenGrid&);                        \
  template Var<T> cross_entropy_mean(Var<T>, const TokenGrid&);                      \
  template Var<T> rope_apply(Var<T>, std::span<const std::size_t>, double);

SATLAB_INSTANTIATE(float)
SATLAB_INSTANTIATE(double)
#undef SATLAB_INSTANTIATE

}  // namespace satlab::ad
