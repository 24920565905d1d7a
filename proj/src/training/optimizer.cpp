#include <fmt/format.h>

#include <cmath>

#include "satlab/training.hpp"

namespace satlab {

template <typename T>
OptimizerState<T> OptimizerState<T>::zeros_like(std::span<Param<T>* const> params) {
  OptimizerState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const auto* p : params) {
    s.m.emplace_back(p->value.shape());
    s.v.emplace_back(p->value.shape());
  }
  return s;
}

template <typename T>
void adamw_step(std::span<Param<T>* const> params, OptimizerState<T>& state, double lr, const TrainConfig& cfg) {
  if (!(lr >= 0.0)) throw std::invalid_argument(fmt::format("adamw_step: lr must be non-negative, got {}", lr));
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument(fmt::format("adamw_step: optimizer holds {} moments for {} params",
                                            state.m.size(), params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* p = params[i];
    if (state.m[i].shape() != p->value.shape() || state.v[i].shape() != p->value.shape() ||
        p->grad.shape() != p->value.shape()) {
      throw std::invalid_argument(fmt::format("adamw_step: shape mismatch for '{}' ({})", p->name,
                                              to_string(p->value.shape())));
    }
    for (std::size_t k = 0; k < p->grad.size(); ++k) {
      if (!std::isfinite(static_cast<double>(p->grad[k]))) {
        throw NonFiniteError(fmt::format("adamw_step: non-finite gradient {} in '{}' at index {}",
                                         static_cast<double>(p->grad[k]), p->name, k));
      }
    }
  }

  state.step += 1;
  const double b1 = cfg.adam_beta1;
  const double b2 = cfg.adam_beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * cfg.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    T* w = p->value.data();
    const T* g = p->grad.data();
    T* m = state.m[i].data();
    T* v = state.v[i].data();
    const bool decayed = p->decay && cfg.weight_decay != 0.0;
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      const double gk = g[k];
      const double mk = b1 * m[k] + (1.0 - b1) * gk;
      const double vk = b2 * v[k] + (1.0 - b2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      double wk = w[k];
      if (decayed) wk *= decay;
      wk -= lr * (mk / c1) / (std::sqrt(vk / c2) + cfg.adam_eps);
      w[k] = static_cast<T>(wk);
    }
  }
}

template <typename T>
double global_grad_norm(std::span<Param<T>* const> params) {
  double sum = 0.0;
  for (const auto* p : params) {
    for (T g : p->grad.values()) sum += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sum);
}

template <typename T>
double clip_global_norm(std::span<Param<T>* const> params, double max_norm) {
  if (!(max_norm > 0.0)) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (!(norm > max_norm)) return 1.0;
  const double factor = max_norm / norm;
  for (auto* p : params) {
    for (T& g : p->grad.values()) g = static_cast<T>(static_cast<double>(g) * factor);
  }
  return factor;
}

#define SATLAB_INSTANTIATE(T)                                                                            \
  template struct OptimizerState<T>;                                                                     \
  template void adamw_step<T>(std::span<Param<T>* const>, OptimizerState<T>&, double, const TrainConfig&); \
  template double global_grad_norm<T>(std::span<Param<T>* const>);                                       \
  template double clip_global_norm<T>(std::span<Param<T>* const>, double);

SATLAB_INSTANTIATE(float)
SATLAB_INSTANTIATE(double)

#undef SATLAB_INSTANTIATE

}  // namespace satlab
