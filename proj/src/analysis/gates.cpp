#include <fmt/format.h>

#include <cmath>

#include "satlab/analysis.hpp"

namespace satlab {

template <typename T>
void GateStatsAccumulator::add(const Tensor<T>& alpha) {
  if (alpha.rank() != 4) {
    throw std::invalid_argument(fmt::format("gate stats: alpha must be [L-1, B, T, N_kv], got {}",
                                            to_string(alpha.shape())));
  }
  const std::size_t layers = alpha.extent(0);
  const std::size_t heads = alpha.extent(3);
  if (sums_.empty()) {
    layers_ = layers;
    heads_ = heads;
    sums_.assign(layers * heads, 0.0);
    zeros_.assign(layers, 0);
  } else if (layers != layers_ || heads != heads_) {
    throw std::invalid_argument(fmt::format("gate stats: alpha {} does not match earlier [{}, *, *, {}]",
                                            to_string(alpha.shape()), layers_, heads_));
  }
  const std::size_t per_layer = alpha.size() / std::max<std::size_t>(layers, 1);
  for (std::size_t l = 0; l < layers; ++l) {
    const T* a = alpha.data() + l * per_layer;
    double* s = sums_.data() + l * heads;
    for (std::size_t i = 0; i < per_layer; ++i) {
      s[i % heads] += static_cast<double>(a[i]);
      if (a[i] == T{0}) ++zeros_[l];
    }
  }
  count_ += per_layer / std::max<std::size_t>(heads, 1);
}

GateStats GateStatsAccumulator::finish() const {
  if (count_ == 0) throw std::invalid_argument("gate stats: no alpha values were added");
  GateStats s;
  s.layers = layers_;
  s.heads = heads_;
  s.entries_per_layer = count_ * heads_;
  s.mean_alpha.resize(layers_ * heads_);
  for (std::size_t i = 0; i < sums_.size(); ++i) s.mean_alpha[i] = sums_[i] / static_cast<double>(count_);
  for (std::size_t l = 0; l < layers_; ++l) {
    double total = 0.0;
    for (std::size_t j = 0; j < heads_; ++j) total += sums_[l * heads_ + j];
    s.layer_mean.push_back(total / static_cast<double>(s.entries_per_layer));
    s.sparsity.push_back(static_cast<double>(zeros_[l]) / static_cast<double>(s.entries_per_layer));
    double mu = 0.0;
    for (std::size_t j = 0; j < heads_; ++j) mu += s.mean(l, j);
    mu /= static_cast<double>(heads_);
    double var = 0.0;
    for (std::size_t j = 0; j < heads_; ++j) var += (s.mean(l, j) - mu) * (s.mean(l, j) - mu);
    var /= static_cast<double>(heads_);
    s.head_cv.push_back(std::sqrt(var) / std::max(std::abs(mu), 1e-8));
  }
  return s;
}

template <typename T>
GateStats gate_stats(const Diagnostics<T>& diagnostics) {
  if (!diagnostics.has_alpha()) throw std::invalid_argument("gate stats: diagnostics carry no gate values (not a satformer)");
  GateStatsAccumulator acc;
  acc.add(diagnostics.alpha);
  return acc.finish();
}

namespace {

template <typename T>
void require_sat(const ModelWeights<T>& w, const char* what) {
  if (w.config.variant != Variant::satformer) {
    throw std::invalid_argument(fmt::format("{}: requires a satformer model, got {}", what, to_string(w.config.variant)));
  }
}

}  // namespace

template <typename T>
GateStats gate_stats(const ModelWeights<T>& weights, std::span<const Batch> data) {
  require_sat(weights, "gate stats");
  if (data.empty()) throw std::invalid_argument("gate stats: no data");
  GateStatsAccumulator acc;
  for (const auto& b : data) acc.add(forward_with_diagnostics(weights, b.inputs).diagnostics.alpha);
  return acc.finish();
}

std::string_view to_string(InterventionMode m) {
  switch (m) {
    case InterventionMode::zero: return "zero";
    case InterventionMode::mean: return "mean";
    case InterventionMode::head_mean: return "head_mean";
  }
  return "unknown";
}

GateOverride intervention_override(const GateStats& stats, std::size_t layer, InterventionMode mode) {
  if (layer < 2 || layer > stats.layers + 1) {
    throw std::out_of_range(fmt::format("intervene: layer {} outside [2, {}]", layer, stats.layers + 1));
  }
  const std::size_t row = layer - 2;
  switch (mode) {
    case InterventionMode::zero: return GateOverride::zero();
    case InterventionMode::mean: return GateOverride::constant(stats.layer_mean[row]);
    case InterventionMode::head_mean:
      return GateOverride::heads(std::vector<double>(stats.mean_alpha.begin() + static_cast<std::ptrdiff_t>(row * stats.heads),
                                                     stats.mean_alpha.begin() + static_cast<std::ptrdiff_t>((row + 1) * stats.heads)));
  }
  return {};
}

template <typename T>
EvalResult intervene(const ModelWeights<T>& weights, std::span<const Batch> data, std::size_t layer,
                     InterventionMode mode, const GateStats* stats) {
  require_sat(weights, "intervene");
  const std::size_t L = weights.config.n_layers;
  if (layer < 2 || layer > L) throw std::out_of_range(fmt::format("intervene: layer {} outside [2, {}]", layer, L));
  std::optional<GateStats> computed;
  if (mode != InterventionMode::zero && !stats) {
    computed = gate_stats(weights, data);
    stats = &*computed;
  }
  ForwardOptions opt;
  opt.gate_overrides.resize(L);
  opt.gate_overrides[layer - 1] =
      mode == InterventionMode::zero ? GateOverride::zero() : intervention_override(*stats, layer, mode);
  return evaluate_perplexity(weights, data, opt);
}

template <typename T>
InterventionReport intervention_report(const ModelWeights<T>& weights, std::span<const Batch> data,
                                       bool per_head_mean) {
  require_sat(weights, "intervene");
  const auto stats = gate_stats(weights, data);
  const double baseline = evaluate_perplexity(weights, data).perplexity;
  InterventionReport r;
  for (std::size_t layer = 2; layer <= weights.config.n_layers; ++layer) {
    InterventionRow row;
    row.layer = layer;
    row.baseline = baseline;
    row.zeroed = intervene(weights, data, layer, InterventionMode::zero, &stats).perplexity;
    row.mean = intervene(weights, data, layer, InterventionMode::mean, &stats).perplexity;
    if (per_head_mean) row.head_mean = intervene(weights, data, layer, InterventionMode::head_mean, &stats).perplexity;
    r.rows.push_back(row);
  }
  return r;
}

#define SATLAB_INSTANTIATE(T)                                                                               \
  template void GateStatsAccumulator::add<T>(const Tensor<T>&);                                             \
  template GateStats gate_stats<T>(const Diagnostics<T>&);                                                  \
  template GateStats gate_stats<T>(const ModelWeights<T>&, std::span<const Batch>);                         \
  template EvalResult intervene<T>(const ModelWeights<T>&, std::span<const Batch>, std::size_t, InterventionMode, \
                                   const GateStats*);                                                       \
  template InterventionReport intervention_report<T>(const ModelWeights<T>&, std::span<const Batch>, bool);

SATLAB_INSTANTIATE(float)
SATLAB_INSTANTIATE(double)
#undef SATLAB_INSTANTIATE

}  // namespace satlab
