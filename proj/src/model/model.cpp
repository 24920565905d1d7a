#include "satlab/model.hpp"

#include <fmt/format.h>

#include <cmath>
#include <random>

namespace satlab {

using ad::Var;

namespace {

std::uint64_t stream_seed(std::uint64_t seed, std::string_view name) {
  std::uint64_t h = 1469598103934665603ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
Param<T> uniform_param(std::uint64_t seed, std::string name, Shape shape, double bound, bool decay) {
  std::mt19937_64 rng(stream_seed(seed, name));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<T> v(std::move(shape));
  for (auto& x : v.values()) x = static_cast<T>(dist(rng));
  return Param<T>(std::move(name), std::move(v), decay);
}

template <typename T>
Param<T> linear(std::uint64_t seed, std::string name, std::size_t fan_in, std::size_t fan_out, bool decay = true) {
  return uniform_param<T>(seed, std::move(name), Shape{fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)),
                          decay);
}

template <typename T>
Param<T> filled(std::string name, Shape shape, T value) {
  return Param<T>(std::move(name), Tensor<T>(std::move(shape), value), false);
}

template <typename T, typename W, typename F>
void visit_params(W& w, F&& f) {
  f(w.embedding);
  for (auto& layer : w.layers) {
    f(layer.attn_norm);
    f(layer.attn.wq);
    f(layer.attn.wk);
    f(layer.attn.wv);
    f(layer.attn.wo);
    if (layer.attn.w_alpha) f(*layer.attn.w_alpha);
    f(layer.ffn_norm);
    f(layer.w_in);
    f(layer.w_out);
  }
  f(w.final_norm);
  if (w.unembedding) f(*w.unembedding);
  if (w.lambdas) {
    f(w.lambdas->logits);
    f(w.lambdas->lambda2);
  }
}

}  // namespace

template <typename T>
std::vector<Param<T>*> ModelWeights<T>::parameters() {
  std::vector<Param<T>*> out;
  visit_params<T>(*this, [&](Param<T>& p) { out.push_back(&p); });
  return out;
}

template <typename T>
std::vector<const Param<T>*> ModelWeights<T>::parameters() const {
  std::vector<const Param<T>*> out;
  visit_params<T>(*this, [&](const Param<T>& p) { out.push_back(&p); });
  return out;
}

template <typename T>
std::size_t ModelWeights<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

template <typename T>
void ModelWeights<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
std::uint64_t ModelWeights<T>::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto* p : parameters()) h = content_hash(p->value, h);
  return h;
}

template <typename T>
Param<T>* ModelWeights<T>::find(std::string_view name) {
  for (auto* p : parameters()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

template <typename T>
template <typename U>
ModelWeights<U> ModelWeights<T>::cast() const {
  auto conv = [](const Param<T>& p) {
    Param<U> q(p.name, p.value.template cast<U>(), p.decay);
    q.grad = p.grad.template cast<U>();
    return q;
  };
  ModelWeights<U> out;
  out.config = config;
  out.embedding = conv(embedding);
  for (const auto& l : layers) {
    LayerWeights<U> m;
    m.attn_norm = conv(l.attn_norm);
    m.attn.wq = conv(l.attn.wq);
    m.attn.wk = conv(l.attn.wk);
    m.attn.wv = conv(l.attn.wv);
    m.attn.wo = conv(l.attn.wo);
    if (l.attn.w_alpha) m.attn.w_alpha = conv(*l.attn.w_alpha);
    m.ffn_norm = conv(l.ffn_norm);
    m.w_in = conv(l.w_in);
    m.w_out = conv(l.w_out);
    out.layers.push_back(std::move(m));
  }
  out.final_norm = conv(final_norm);
  if (unembedding) out.unembedding = conv(*unembedding);
  if (lambdas) {
    ResLambdas<U> r;
    r.logits = conv(lambdas->logits);
    r.lambda2 = conv(lambdas->lambda2);
    r.scale = static_cast<U>(lambdas->scale);
    out.lambdas = std::move(r);
  }
  return out;
}

template <typename T>
ModelWeights<T> build_model(const ModelConfig& c) {
  c.validate();
  const std::uint64_t seed = c.seed;
  const std::size_t d = c.d_model;
  const std::size_t dh = c.d_head();
  ModelWeights<T> w;
  w.config = c;
  {
    std::mt19937_64 rng(stream_seed(seed, "embedding"));
    std::normal_distribution<double> dist(0.0, 0.02);
    Tensor<T> e(Shape{c.vocab_size, d});
    for (auto& x : e.values()) x = static_cast<T>(dist(rng));
    w.embedding = Param<T>("embedding", std::move(e), true);
  }
  for (std::size_t n = 1; n <= c.n_layers; ++n) {
    const std::string prefix = fmt::format("layer{}.", n);
    LayerWeights<T> l;
    l.attn_norm = filled<T>(prefix + "attn_norm", Shape{d}, T{1});
    l.attn.wq = linear<T>(seed, prefix + "attn.wq", d, c.n_heads * dh);
    l.attn.wk = linear<T>(seed, prefix + "attn.wk", d, c.n_kv_heads * dh);
    l.attn.wv = linear<T>(seed, prefix + "attn.wv", d, c.n_kv_heads * dh);
    l.attn.wo = linear<T>(seed, prefix + "attn.wo", c.n_heads * dh, d);
    if (c.variant == Variant::satformer && n > 1) {
      l.attn.w_alpha = linear<T>(seed, prefix + "attn.w_alpha", d, c.n_kv_heads, false);
    }
    l.ffn_norm = filled<T>(prefix + "ffn_norm", Shape{d}, T{1});
    l.w_in = linear<T>(seed, prefix + "ffn.w_in", d, c.d_ff);
    l.w_out = linear<T>(seed, prefix + "ffn.w_out", c.d_ff, d);
    w.layers.push_back(std::move(l));
  }
  w.final_norm = filled<T>("final_norm", Shape{d}, T{1});
  if (!c.tie_embeddings) w.unembedding = linear<T>(seed, "unembedding", d, c.vocab_size);
  if (c.variant == Variant::resformer) {
    ResLambdas<T> r;
    r.logits = filled<T>("res.lambda_logits", Shape{c.n_layers - 1}, T{0});
    r.lambda2 = filled<T>("res.lambda2", Shape{1}, T{1});
    r.scale = static_cast<T>(c.n_layers);
    w.lambdas = std::move(r);
  }
  return w;
}

std::size_t count_params(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model;
  const std::size_t dh = c.d_head();
  const std::size_t per_layer =
      2 * d + d * c.n_heads * dh + 2 * d * c.n_kv_heads * dh + c.n_heads * dh * d + 2 * d * c.d_ff;
  std::size_t n = c.vocab_size * d + d + c.n_layers * per_layer;
  if (!c.tie_embeddings) n += c.vocab_size * d;
  if (c.variant == Variant::satformer) n += (c.n_layers - 1) * d * c.n_kv_heads;
  if (c.variant == Variant::resformer) n += (c.n_layers - 1) + 1;
  return n;
}

template <typename T>
Var<T> decode_hidden(ad::Tape<T>& tape, const ModelWeights<T>& w, Var<T> hidden) {
  auto h = ad::rms_norm(hidden, tape.param(w.final_norm), static_cast<T>(kNormEps));
  if (w.unembedding) return ad::matmul(h, tape.param(*w.unembedding));
  return ad::matmul(h, ad::permute(tape.param(w.embedding), {1, 0}));
}

template <typename T>
ForwardTrace<T> forward_graph(ad::Tape<T>& tape, const ModelWeights<T>& w, const TokenGrid& tokens,
                              const ForwardOptions& options) {
  const ModelConfig& c = w.config;
  if (tokens.length == 0 || tokens.batch == 0) throw ShapeError("forward: empty token grid");
  if (tokens.length > c.max_seq_len) {
    throw ShapeError(fmt::format("forward: sequence length {} exceeds max_seq_len {}", tokens.length, c.max_seq_len));
  }
  if (!options.gate_overrides.empty() && options.gate_overrides.size() != c.n_layers) {
    throw std::invalid_argument(
        fmt::format("forward: {} gate overrides for {} layers", options.gate_overrides.size(), c.n_layers));
  }
  const T eps = static_cast<T>(kNormEps);
  ForwardTrace<T> trace;
  auto embed = tape.param(w.embedding);
  Var<T> x = ad::embedding_lookup(embed, tokens);
  trace.hidden.push_back(x);

  std::optional<ResLambdaVars<T>> lambdas;
  if (c.variant == Variant::resformer) lambdas = bind_res_lambdas(tape, *w.lambdas);

  std::optional<Var<T>> v1;
  for (std::size_t n = 1; n <= c.n_layers; ++n) {
    const auto& layer = w.layers[n - 1];
    MixingContext<T> mix;
    mix.variant = c.variant;
    mix.gate = c.gate_spec;
    mix.layer = n;
    mix.v1 = v1;
    mix.lambdas = lambdas;
    if (!options.gate_overrides.empty()) mix.gate_override = options.gate_overrides[n - 1];

    auto h = ad::rms_norm(x, tape.param(layer.attn_norm), eps);
    auto attn = attention_layer_forward(tape, h, layer.attn, c.n_heads, c.n_kv_heads, mix);
    if (n == 1) v1 = attn.v_base;
    if (attn.alpha) trace.alpha.push_back(*attn.alpha);
    x = ad::add(x, attn.y);

    auto h2 = ad::rms_norm(x, tape.param(layer.ffn_norm), eps);
    auto ff = ad::matmul(ad::gelu(ad::matmul(h2, tape.param(layer.w_in))), tape.param(layer.w_out));
    x = ad::add(x, ff);
    trace.hidden.push_back(x);
  }

  trace.logits = decode_hidden(tape, w, x);
  return trace;
}

namespace {

template <typename T>
Tensor<T> stack(const std::vector<Var<T>>& vars) {
  if (vars.empty()) return {};
  Shape s{vars.size()};
  for (auto e : vars.front().shape()) s.push_back(e);
  Tensor<T> out(s);
  const std::size_t each = vars.front().value().size();
  for (std::size_t i = 0; i < vars.size(); ++i) {
    std::copy_n(vars[i].value().data(), each, out.data() + i * each);
  }
  return out;
}

}  // namespace

template <typename T>
ForwardOutput<T> forward_with_diagnostics(const ModelWeights<T>& w, const TokenGrid& tokens,
                                          const ForwardOptions& options) {
  ad::Tape<T> tape(false);
  auto trace = forward_graph(tape, w, tokens, options);
  ForwardOutput<T> out;
  out.logits = trace.logits.value();
  out.diagnostics.alpha = stack(trace.alpha);
  out.diagnostics.hidden = stack(trace.hidden);
  return out;
}

template <typename T>
Tensor<T> forward(const ModelWeights<T>& w, const TokenGrid& tokens, const ForwardOptions& options) {
  ad::Tape<T> tape(false);
  return forward_graph(tape, w, tokens, options).logits.value();
}

#define SATLAB_INSTANTIATE(T)                                                                                 \
  template struct ModelWeights<T>;                                                                            \
  template ModelWeights<T> build_model<T>(const ModelConfig&);                                                \
  template ForwardTrace<T> forward_graph(ad::Tape<T>&, const ModelWeights<T>&, const TokenGrid&,              \
                                         const ForwardOptions&);                                              \
  template Var<T> decode_hidden(ad::Tape<T>&, const ModelWeights<T>&, Var<T>);                                \
  template Tensor<T> forward(const ModelWeights<T>&, const TokenGrid&, const ForwardOptions&);                \
  template ForwardOutput<T> forward_with_diagnostics(const ModelWeights<T>&, const TokenGrid&,                \
                                                     const ForwardOptions&);

SATLAB_INSTANTIATE(float)
SATLAB_INSTANTIATE(double)
#undef SATLAB_INSTANTIATE

template ModelWeights<double> ModelWeights<float>::cast<double>() const;
template ModelWeights<float> ModelWeights<double>::cast<float>() const;
template ModelWeights<float> ModelWeights<float>::cast<float>() const;
template ModelWeights<double> ModelWeights<double>::cast<double>() const;

}  // namespace satlab
