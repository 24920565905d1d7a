#pragma once

// Causal grouped-query attention with the first-layer value residual hook.
//
// Layer 1 produces the raw value projection V1. Every deeper layer n mixes V1 into its
// own values before attention:
//   transformer: V'_n = V_n
//   resformer:   V'_n = lambda1_n * V1 + lambda2 * V_n        (layer-global scalars)
//   satformer:   V'_n = V_n + alpha_n(t, j) * V1              (per token t, per KV head j)
// with alpha_n = gate(x_norm W_alpha) computed from the layer's normalized input.

#include <optional>
#include <vector>

#include "satlab/autodiff.hpp"
#include "satlab/config.hpp"
#include "satlab/param.hpp"

namespace satlab {

inline constexpr double kRopeBase = 10000.0;

/// Bias-free projections of one attention layer. Layout is [in, out].
template <typename T>
struct AttentionWeights {
  Param<T> wq;  // [d_model, n_heads * d_head]
  Param<T> wk;  // [d_model, N_kv * d_head]
  Param<T> wv;  // [d_model, N_kv * d_head]
  Param<T> wo;  // [n_heads * d_head, d_model]
  std::optional<Param<T>> w_alpha;  // [d_model, N_kv]; satformer layers n > 1 only
};

/// ResFormer mixing scalars. lambda1 for layer n is scale * softmax(z)_n over all L
/// layers, where z = [0, logits...]: the layer-1 slot is a fixed zero logit (layer 1 is
/// never mixed) and layers 2..L own one learnable logit each. lambda2 is one learnable
/// scalar shared by every layer.
template <typename T>
struct ResLambdas {
  Param<T> logits;   // [L - 1]
  Param<T> lambda2;  // [1]
  T scale = T{1};    // fixed at L

  /// Current lambda1 for every layer 1..L (index 0 is the unused layer-1 slot).
  std::vector<double> lambda1() const;
  /// Sets the logits so that every consumer layer gets lambda1 == value. Requires
  /// 0 < value * (L-1) < scale.
  void set_uniform_lambda1(double value);
};

/// Tape handles for the ResFormer scalars of one forward pass.
template <typename T>
struct ResLambdaVars {
  ad::Var<T> lambda1;  // [L]
  ad::Var<T> lambda2;  // [1]
};

template <typename T>
ResLambdaVars<T> bind_res_lambdas(ad::Tape<T>& tape, const ResLambdas<T>& lambdas);

/// Replacement of one layer's gate during analysis.
struct GateOverride {
  enum class Mode { none, zero, constant, per_head };
  Mode mode = Mode::none;
  double value = 0.0;
  std::vector<double> per_head;

  static GateOverride zero() { return {Mode::zero, 0.0, {}}; }
  static GateOverride constant(double c) { return {Mode::constant, c, {}}; }
  static GateOverride heads(std::vector<double> v) { return {Mode::per_head, 0.0, std::move(v)}; }
  bool active() const { return mode != Mode::none; }
};

/// alpha [B, T, N_kv] from the normalized hidden state and the gate projection.
template <typename T>
ad::Var<T> compute_gate(ad::Var<T> x_norm, ad::Var<T> w_alpha, GateKind kind);

/// V_n + alpha * V1 with alpha [B, T, N_kv] broadcast over the head dimension.
template <typename T>
ad::Var<T> mix_values_sat(ad::Var<T> v_n, ad::Var<T> v_1, ad::Var<T> alpha);

/// lambda1 * V1 + lambda2 * V_n with scalar (single-element) coefficients.
template <typename T>
ad::Var<T> mix_values_res(ad::Var<T> v_n, ad::Var<T> v_1, ad::Var<T> lambda1, ad::Var<T> lambda2);

/// ResFormer mixing for 1-based `layer`; layer 1 is rejected.
template <typename T>
ad::Var<T> mix_values_res(ad::Var<T> v_n, ad::Var<T> v_1, const ResLambdaVars<T>& lambdas,
                          std::size_t layer);

/// Causal softmax attention. q [B,T,n_heads,d], k and v [B,T,N_kv,d]; query head h reads
/// KV head h / (n_heads / N_kv). Returns [B, T, n_heads * d].
template <typename T>
ad::Var<T> causal_attention(ad::Var<T> q, ad::Var<T> k, ad::Var<T> v);

/// Everything a layer needs to know about value mixing.
template <typename T>
struct MixingContext {
  Variant variant = Variant::transformer;
  GateKind gate = GateKind::relu;
  std::size_t layer = 1;                   // 1-based
  std::optional<ad::Var<T>> v1;            // absent iff layer == 1
  std::optional<ResLambdaVars<T>> lambdas;  // resformer only
  GateOverride gate_override;
};

template <typename T>
struct AttentionOutput {
  ad::Var<T> y;                    // [B, T, d_model] after W_O
  ad::Var<T> v_base;               // raw value projection [B, T, N_kv, d_head]
  std::optional<ad::Var<T>> alpha;  // [B, T, N_kv] as used in mixing (satformer, n > 1)
};

/// One attention sublayer on an already-normalized input.
template <typename T>
AttentionOutput<T> attention_layer_forward(ad::Tape<T>& tape, ad::Var<T> x_norm,
                                           const AttentionWeights<T>& weights,
                                           std::size_t n_heads, std::size_t n_kv_heads,
                                           const MixingContext<T>& mixing);

}  // namespace satlab
