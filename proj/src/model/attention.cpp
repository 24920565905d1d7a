#include "satlab/attention.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace satlab {

using ad::Var;

template <typename T>
std::vector<double> ResLambdas<T>::lambda1() const {
  std::vector<double> z(logits.value.size() + 1, 0.0);
  for (std::size_t i = 0; i < logits.value.size(); ++i) z[i + 1] = static_cast<double>(logits.value[i]);
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (auto& v : z) total += (v = std::exp(v - mx));
  for (auto& v : z) v = static_cast<double>(scale) * v / total;
  return z;
}

template <typename T>
void ResLambdas<T>::set_uniform_lambda1(double value) {
  const double consumers = static_cast<double>(logits.value.size());
  const double s = static_cast<double>(scale);
  if (!(value > 0.0) || !(value * consumers < s)) {
    throw std::invalid_argument(
        fmt::format("uniform lambda1 {} not reachable with scale {} over {} consumer layers", value, s, consumers));
  }
  // scale * e / (1 + n e) = value  =>  e = value / (scale - n value)
  logits.value.fill(static_cast<T>(std::log(value / (s - consumers * value))));
}

template <typename T>
ResLambdaVars<T> bind_res_lambdas(ad::Tape<T>& tape, const ResLambdas<T>& lambdas) {
  auto anchor = tape.constant(Tensor<T>(Shape{1}, T{0}));
  auto z = ad::concat_lastdim(anchor, tape.param(lambdas.logits));
  auto lambda1 = ad::scale(ad::softmax_lastdim(z), lambdas.scale);
  return {lambda1, tape.param(lambdas.lambda2)};
}

template <typename T>
Var<T> compute_gate(Var<T> x_norm, Var<T> w_alpha, GateKind kind) {
  const auto& ws = w_alpha.shape();
  if (ws.size() != 2 || x_norm.shape().empty() || x_norm.shape().back() != ws[0]) {
    throw ShapeError(fmt::format("compute_gate: input {} with W_alpha {}", to_string(x_norm.shape()), to_string(ws)));
  }
  const T n_kv = static_cast<T>(ws[1]);
  auto logits = ad::matmul(x_norm, w_alpha);
  switch (kind) {
    case GateKind::relu: return ad::relu(logits);
    case GateKind::sigmoid: return ad::sigmoid(logits);
    case GateKind::softmax: return ad::scale(ad::softmax_lastdim(logits), n_kv);
    case GateKind::softmax_sigmoid:
      return ad::scale(ad::mul(ad::softmax_lastdim(logits), ad::sigmoid(logits)), n_kv);
    case GateKind::tanh: return ad::tanh(logits);
    case GateKind::identity: return logits;
  }
  throw std::invalid_argument("compute_gate: unknown gate kind");
}

template <typename T>
Var<T> mix_values_sat(Var<T> v_n, Var<T> v_1, Var<T> alpha) {
  const Shape& s = v_n.shape();
  if (s.size() != 4 || v_1.shape() != s) {
    throw ShapeError(fmt::format("mix_values_sat: V_n {} vs V_1 {}", to_string(s), to_string(v_1.shape())));
  }
  const Shape gate_shape{s[0], s[1], s[2]};
  if (alpha.shape() != gate_shape) {
    throw ShapeError(fmt::format("mix_values_sat: alpha {} for values {}", to_string(alpha.shape()), to_string(s)));
  }
  auto a4 = ad::reshape(alpha, Shape{s[0], s[1], s[2], 1});
  return ad::add(v_n, ad::mul(a4, v_1));
}

template <typename T>
Var<T> mix_values_res(Var<T> v_n, Var<T> v_1, Var<T> lambda1, Var<T> lambda2) {
  if (v_n.shape() != v_1.shape()) {
    throw ShapeError(fmt::format("mix_values_res: V_n {} vs V_1 {}", to_string(v_n.shape()), to_string(v_1.shape())));
  }
  if (lambda1.value().size() != 1 || lambda2.value().size() != 1) {
    throw ShapeError("mix_values_res: lambda coefficients must be single values");
  }
  return ad::add(ad::mul(lambda1, v_1), ad::mul(lambda2, v_n));
}

template <typename T>
Var<T> mix_values_res(Var<T> v_n, Var<T> v_1, const ResLambdaVars<T>& lambdas, std::size_t layer) {
  const std::size_t n_layers = lambdas.lambda1.value().size();
  if (layer < 2 || layer > n_layers) {
    throw std::invalid_argument(fmt::format("mix_values_res: layer {} outside 2..{}", layer, n_layers));
  }
  auto l1 = ad::slice_lastdim(lambdas.lambda1, layer - 1, 1);
  return mix_values_res(v_n, v_1, l1, lambdas.lambda2);
}

template <typename T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v) {
  const Shape& qs = q.shape();
  const Shape& ks = k.shape();
  if (qs.size() != 4 || ks.size() != 4 || v.shape() != ks || qs[0] != ks[0] || qs[1] != ks[1] ||
      qs[3] != ks[3]) {
    throw ShapeError(fmt::format("causal_attention: q {} k {} v {}", to_string(qs), to_string(ks),
                                 to_string(v.shape())));
  }
  const std::size_t b = qs[0], t = qs[1], heads = qs[2], dh = qs[3], kv = ks[2];
  if (heads % kv != 0) {
    throw ShapeError(fmt::format("causal_attention: {} query heads not divisible by {} KV heads", heads, kv));
  }
  const std::size_t group = heads / kv;
  // [B,T,kv,G,d] -> [B,kv,G,T,d]; K/V get a size-1 group axis that broadcasts.
  auto q5 = ad::permute(ad::reshape(q, Shape{b, t, kv, group, dh}), {0, 2, 3, 1, 4});
  auto kt = ad::reshape(ad::permute(k, {0, 2, 3, 1}), Shape{b, kv, 1, dh, t});
  auto v5 = ad::reshape(ad::permute(v, {0, 2, 1, 3}), Shape{b, kv, 1, t, dh});
  auto scores = ad::scale(ad::matmul(q5, kt), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  auto probs = ad::softmax_lastdim(ad::causal_mask(scores));
  auto ctx = ad::matmul(probs, v5);  // [B,kv,G,T,d]
  return ad::reshape(ad::permute(ctx, {0, 3, 1, 2, 4}), Shape{b, t, heads * dh});
}

template <typename T>
AttentionOutput<T> attention_layer_forward(ad::Tape<T>& tape, Var<T> x_norm, const AttentionWeights<T>& w,
                                           std::size_t n_heads, std::size_t n_kv_heads,
                                           const MixingContext<T>& mix) {
  const Shape& xs = x_norm.shape();
  if (xs.size() != 3) throw ShapeError(fmt::format("attention input must be [B,T,d], got {}", to_string(xs)));
  if (n_heads == 0 || n_kv_heads == 0 || n_heads % n_kv_heads != 0) {
    throw ShapeError(fmt::format("attention: {} heads not divisible by {} KV heads", n_heads, n_kv_heads));
  }
  const std::size_t b = xs[0], t = xs[1];
  const std::size_t dh = w.wq.value.shape()[1] / n_heads;
  const bool gated = mix.variant == Variant::satformer && mix.layer > 1;
  if (gated != w.w_alpha.has_value()) {
    throw std::invalid_argument(fmt::format("attention layer {}: variant {} {} a gate projection", mix.layer,
                                            to_string(mix.variant), gated ? "requires" : "must not have"));
  }
  if ((mix.layer == 1) == mix.v1.has_value()) {
    throw std::invalid_argument(fmt::format("attention layer {}: V1 must be {}", mix.layer,
                                            mix.layer == 1 ? "absent" : "supplied"));
  }
  if (mix.variant == Variant::resformer && mix.layer > 1 && !mix.lambdas) {
    throw std::invalid_argument("attention: resformer layer without lambdas");
  }
  if (mix.gate_override.active() && !gated) {
    throw std::invalid_argument(fmt::format("attention layer {}: gate override on an ungated layer", mix.layer));
  }

  auto q = ad::reshape(ad::matmul(x_norm, tape.param(w.wq)), Shape{b, t, n_heads, dh});
  auto k = ad::reshape(ad::matmul(x_norm, tape.param(w.wk)), Shape{b, t, n_kv_heads, dh});
  auto v = ad::reshape(ad::matmul(x_norm, tape.param(w.wv)), Shape{b, t, n_kv_heads, dh});
  std::vector<std::size_t> positions(t);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  q = ad::rope_apply(q, positions, kRopeBase);
  k = ad::rope_apply(k, positions, kRopeBase);

  AttentionOutput<T> out;
  out.v_base = v;
  Var<T> mixed = v;
  if (mix.layer > 1) {
    if (v.shape() != mix.v1->shape()) {
      throw ShapeError(fmt::format("attention layer {}: V1 {} vs values {}", mix.layer,
                                   to_string(mix.v1->shape()), to_string(v.shape())));
    }
    switch (mix.variant) {
      case Variant::transformer: break;
      case Variant::resformer: mixed = mix_values_res(v, *mix.v1, *mix.lambdas, mix.layer); break;
      case Variant::satformer: {
        Var<T> alpha;
        const Shape gate_shape{b, t, n_kv_heads};
        switch (mix.gate_override.mode) {
          case GateOverride::Mode::none:
            alpha = compute_gate(x_norm, tape.param(*w.w_alpha), mix.gate);
            break;
          case GateOverride::Mode::zero:
            alpha = tape.constant(Tensor<T>(gate_shape, T{0}));
            break;
          case GateOverride::Mode::constant:
            alpha = tape.constant(Tensor<T>(gate_shape, static_cast<T>(mix.gate_override.value)));
            break;
          case GateOverride::Mode::per_head: {
            if (mix.gate_override.per_head.size() != n_kv_heads) {
              throw std::invalid_argument(fmt::format("per-head gate override needs {} values, got {}", n_kv_heads,
                                                      mix.gate_override.per_head.size()));
            }
            Tensor<T> a(gate_shape);
            for (std::size_t i = 0; i < a.size(); ++i) a[i] = static_cast<T>(mix.gate_override.per_head[i % n_kv_heads]);
            alpha = tape.constant(std::move(a));
            break;
          }
        }
        mixed = mix_values_sat(v, *mix.v1, alpha);
        out.alpha = alpha;
        break;
      }
    }
  }
  auto attn = causal_attention(q, k, mixed);
  out.y = ad::matmul(attn, tape.param(w.wo));
  return out;
}

#define SATLAB_INSTANTIATE(T)                                                                           \
  template struct ResLambdas<T>;                                                                        \
  template ResLambdaVars<T> bind_res_lambdas(ad::Tape<T>&, const ResLambdas<T>&);                       \
  template Var<T> compute_gate(Var<T>, Var<T>, GateKind);                                               \
  template Var<T> mix_values_sat(Var<T>, Var<T>, Var<T>);                                               \
  template Var<T> mix_values_res(Var<T>, Var<T>, Var<T>, Var<T>);                                       \
  template Var<T> mix_values_res(Var<T>, Var<T>, const ResLambdaVars<T>&, std::size_t);                 \
  template Var<T> causal_attention(Var<T>, Var<T>, Var<T>);                                             \
  template AttentionOutput<T> attention_layer_forward(ad::Tape<T>&, Var<T>, const AttentionWeights<T>&, \
                                                      std::size_t, std::size_t, const MixingContext<T>&);

SATLAB_INSTANTIATE(float)
SATLAB_INSTANTIATE(double)
#undef SATLAB_INSTANTIATE

}  // namespace satlab
