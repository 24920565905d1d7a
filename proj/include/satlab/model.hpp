#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "satlab/attention.hpp"
#include "satlab/autodiff.hpp"
#include "satlab/config.hpp"
#include "satlab/param.hpp"

namespace satlab {

inline constexpr double kNormEps = 1e-5;

/// One pre-norm block: x += attn(norm(x)); x += ffn(norm(x)).
template <typename T>
struct LayerWeights {
  Param<T> attn_norm;  // [d_model]
  AttentionWeights<T> attn;
  Param<T> ffn_norm;  // [d_model]
  Param<T> w_in;      // [d_model, d_ff]
  Param<T> w_out;     // [d_ff, d_model]
};

template <typename T>
struct ModelWeights {
  ModelConfig config;
  Param<T> embedding;  // [vocab, d_model]
  std::vector<LayerWeights<T>> layers;
  Param<T> final_norm;                 // [d_model]
  std::optional<Param<T>> unembedding;  // [d_model, vocab] when not tied
  std::optional<ResLambdas<T>> lambdas;  // resformer only

  /// Every learnable tensor in a fixed order (the checkpoint and optimizer order).
  std::vector<Param<T>*> parameters();
  std::vector<const Param<T>*> parameters() const;
  /// Number of stored scalars across all parameters.
  std::size_t parameter_count() const;
  void zero_grad();
  /// Combined content hash of every parameter value.
  std::uint64_t hash() const;

  Param<T>* find(std::string_view name);

  template <typename U>
  ModelWeights<U> cast() const;
};

/// Deterministic construction from config.seed. Every parameter draws from its own
/// stream keyed by (seed, name), so variants built from one seed share all common weights.
/// Linear layers: U(-1/sqrt(fan_in), +1/sqrt(fan_in)); embedding: N(0, 0.02); norm
/// scales 1; lambda logits 0 and lambda2 1.
template <typename T>
ModelWeights<T> build_model(const ModelConfig& config);

template <typename T>
ModelWeights<T> build_model(ModelConfig config, std::uint64_t seed) {
  config.seed = seed;
  return build_model<T>(config);
}

/// Closed-form parameter count:
///   embedding V*d + final norm d + (untied ? V*d : 0)
///   + per layer: 2d (norms) + d*H*dh + 2*d*Nkv*dh + H*dh*d (attention) + 2*d*d_ff (FFN)
///   + satformer: (L-1)*d*Nkv gate projections
///   + resformer: (L-1) lambda logits + 1 shared lambda2
std::size_t count_params(const ModelConfig& config);

/// Captured per-pass internals.
template <typename T>
struct Diagnostics {
  Tensor<T> alpha;   // [L-1, B, T, N_kv] gate values used in mixing (satformer only; else empty)
  Tensor<T> hidden;  // [L+1, B, T, d_model]: embedding output, then each block output

  bool has_alpha() const { return !alpha.empty(); }
};

struct ForwardOptions {
  /// Empty, or one entry per layer 1..L (index 0 is layer 1 and must stay inactive).
  std::vector<GateOverride> gate_overrides;
};

/// Handles to everything a forward pass records.
template <typename T>
struct ForwardTrace {
  ad::Var<T> logits;
  std::vector<ad::Var<T>> hidden;  // L+1 entries
  std::vector<ad::Var<T>> alpha;   // L-1 entries for satformer, else empty
};

template <typename T>
ForwardTrace<T> forward_graph(ad::Tape<T>& tape, const ModelWeights<T>& weights, const TokenGrid& tokens,
                              const ForwardOptions& options = {});

/// Final norm then unembedding for a [B, T, d_model] hidden state.
template <typename T>
ad::Var<T> decode_hidden(ad::Tape<T>& tape, const ModelWeights<T>& weights, ad::Var<T> hidden);

template <typename T>
Tensor<T> forward(const ModelWeights<T>& weights, const TokenGrid& tokens, const ForwardOptions& options = {});

template <typename T>
struct ForwardOutput {
  Tensor<T> logits;
  Diagnostics<T> diagnostics;
};

template <typename T>
ForwardOutput<T> forward_with_diagnostics(const ModelWeights<T>& weights, const TokenGrid& tokens,
                                          const ForwardOptions& options = {});

}  // namespace satlab
