#include <fmt/format.h>

#include <cmath>

#include "broadcast.hpp"
#include "satlab/autodiff.hpp"

namespace satlab::ad {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

template <typename T, typename F>
void map_into(const Tensor<T>& x, Tensor<T>& y, F f) {
  const T* in = x.data();
  T* out = y.data();
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(in[i]);
}

// gx += g * d(x, y) with d the derivative given input x and output y.
template <typename T, typename F>
void accumulate_derivative(const Tensor<T>& g, const Tensor<T>& x, const Tensor<T>& y, Tensor<T>& gx, F d) {
  const std::size_t n = g.size();
  for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * d(x[i], y[i]);
}

}  // namespace

template <typename T>
Var<T> unary(UnaryKind kind, Var<T> a) {
  const Tensor<T>& x = a.value();
  if (kind == UnaryKind::log) {
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (!(x[i] > T{0})) {
        throw DomainError(fmt::format("log of non-positive value {} at index {}", x[i], i));
      }
    }
  }
  Tensor<T> y(x.shape());
  // gelu keeps tanh(u) for the backward pass.
  Tensor<T> th;
  switch (kind) {
    case UnaryKind::relu: map_into(x, y, [](T v) { return v > T{0} ? v : T{0}; }); break;
    case UnaryKind::sigmoid: map_into(x, y, [](T v) { return T{1} / (T{1} + std::exp(-v)); }); break;
    case UnaryKind::tanh: map_into(x, y, [](T v) { return std::tanh(v); }); break;
    case UnaryKind::identity: y = x; break;
    case UnaryKind::gelu:
      th = Tensor<T>(x.shape());
      map_into(x, th, [](T v) { return std::tanh(T(kGeluC) * (v + T(kGeluK) * v * v * v)); });
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = T(0.5) * x[i] * (T{1} + th[i]);
      break;
    case UnaryKind::exp: map_into(x, y, [](T v) { return std::exp(v); }); break;
    case UnaryKind::log: map_into(x, y, [](T v) { return std::log(v); }); break;
    case UnaryKind::neg: map_into(x, y, [](T v) { return -v; }); break;
  }
  return a.tape->record(OpKind::unary, std::move(y), {a}, [kind, th = std::move(th)](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    const auto& x = ctx.input(0);
    const auto& y = ctx.output();
    auto& gx = ctx.grad_input(0);
    switch (kind) {
      case UnaryKind::relu: accumulate_derivative(g, x, y, gx, [](T v, T) { return v > T{0} ? T{1} : T{0}; }); break;
      case UnaryKind::sigmoid: accumulate_derivative(g, x, y, gx, [](T, T o) { return o * (T{1} - o); }); break;
      case UnaryKind::tanh: accumulate_derivative(g, x, y, gx, [](T, T o) { return T{1} - o * o; }); break;
      case UnaryKind::identity: accumulate_derivative(g, x, y, gx, [](T, T) { return T{1}; }); break;
      case UnaryKind::gelu:
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T v = x[i];
          const T du = T(kGeluC) * (T{1} + T(3 * kGeluK) * v * v);
          gx[i] += g[i] * (T(0.5) * (T{1} + th[i]) + T(0.5) * v * (T{1} - th[i] * th[i]) * du);
        }
        break;
      case UnaryKind::exp: accumulate_derivative(g, x, y, gx, [](T, T o) { return o; }); break;
      case UnaryKind::log: accumulate_derivative(g, x, y, gx, [](T v, T) { return T{1} / v; }); break;
      case UnaryKind::neg: accumulate_derivative(g, x, y, gx, [](T, T) { return T{-1}; }); break;
    }
  });
}

namespace {

template <typename T, typename F>
void binary_forward(const Tensor<T>& x, const Tensor<T>& z, Tensor<T>& y, bool same, F f) {
  if (same) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(x[i], z[i]);
    return;
  }
  const auto sa = detail::broadcast_strides(x.shape(), y.shape());
  const auto sb = detail::broadcast_strides(z.shape(), y.shape());
  detail::for_each_broadcast(y.shape(), sa, sb,
                             [&](std::size_t o, std::size_t ia, std::size_t ib) { y[o] = f(x[ia], z[ib]); });
}

template <typename F>
void visit(const Shape& out, const Shape& pa, const Shape& pb, bool same, std::size_t n, F f) {
  if (same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
  } else {
    detail::for_each_broadcast(out, detail::broadcast_strides(pa, out), detail::broadcast_strides(pb, out), f);
  }
}

}  // namespace

template <typename T>
Var<T> binary(BinaryKind kind, Var<T> a, Var<T> b) {
  const Tensor<T>& x = a.value();
  const Tensor<T>& z = b.value();
  const Shape out_shape = broadcast_shapes(x.shape(), z.shape());
  if (kind == BinaryKind::div) {
    for (std::size_t i = 0; i < z.size(); ++i) {
      if (z[i] == T{0}) throw DomainError(fmt::format("division by zero at divisor index {}", i));
    }
  }
  Tensor<T> y(out_shape);
  const bool same = x.shape() == z.shape();
  switch (kind) {
    case BinaryKind::add: binary_forward(x, z, y, same, [](T p, T q) { return p + q; }); break;
    case BinaryKind::sub: binary_forward(x, z, y, same, [](T p, T q) { return p - q; }); break;
    case BinaryKind::mul: binary_forward(x, z, y, same, [](T p, T q) { return p * q; }); break;
    case BinaryKind::div: binary_forward(x, z, y, same, [](T p, T q) { return p / q; }); break;
  }
  return a.tape->record(OpKind::binary, std::move(y), {a, b}, [kind, same](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    const auto& p = ctx.input(0);
    const auto& q = ctx.input(1);
    const Shape& os = g.shape();
    const std::size_t n = g.size();
    if (ctx.needs_grad(0)) {
      auto& ga = ctx.grad_input(0);
      switch (kind) {
        case BinaryKind::add:
        case BinaryKind::sub:
          visit(os, p.shape(), q.shape(), same, n, [&](std::size_t o, std::size_t ia, std::size_t) { ga[ia] += g[o]; });
          break;
        case BinaryKind::mul:
          visit(os, p.shape(), q.shape(), same, n,
                [&](std::size_t o, std::size_t ia, std::size_t ib) { ga[ia] += g[o] * q[ib]; });
          break;
        case BinaryKind::div:
          visit(os, p.shape(), q.shape(), same, n,
                [&](std::size_t o, std::size_t ia, std::size_t ib) { ga[ia] += g[o] / q[ib]; });
          break;
      }
    }
    if (ctx.needs_grad(1)) {
      auto& gb = ctx.grad_input(1);
      switch (kind) {
        case BinaryKind::add:
          visit(os, p.shape(), q.shape(), same, n, [&](std::size_t o, std::size_t, std::size_t ib) { gb[ib] += g[o]; });
          break;
        case BinaryKind::sub:
          visit(os, p.shape(), q.shape(), same, n, [&](std::size_t o, std::size_t, std::size_t ib) { gb[ib] -= g[o]; });
          break;
        case BinaryKind::mul:
          visit(os, p.shape(), q.shape(), same, n,
                [&](std::size_t o, std::size_t ia, std::size_t ib) { gb[ib] += g[o] * p[ia]; });
          break;
        case BinaryKind::div:
          visit(os, p.shape(), q.shape(), same, n,
                [&](std::size_t o, std::size_t ia, std::size_t ib) { gb[ib] -= g[o] * p[ia] / (q[ib] * q[ib]); });
          break;
      }
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * factor;
  return a.tape->record(OpKind::scale, std::move(y), {a}, [factor](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    auto& gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> sum_all(Var<T> a) {
  const Tensor<T>& x = a.value();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += static_cast<double>(x[i]);
  return a.tape->record(OpKind::sum, Tensor<T>::scalar(static_cast<T>(s)), {a},
                        [](BackwardContext<T>& ctx) {
                          const T g = ctx.grad_output()[0];
                          auto& gx = ctx.grad_input(0);
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
                        });
}

#define SATLAB_INSTANTIATE(T)                                 \
  template Var<T> unary(UnaryKind, Var<T>);                   \
  template Var<T> binary(BinaryKind, Var<T>, Var<T>);         \
  template Var<T> scale(Var<T>, T);                           \
  template Var<T> sum_all(Var<T>);

SATLAB_INSTANTIATE(float)
SATLAB_INSTANTIATE(double)
#undef SATLAB_INSTANTIATE

}  // namespace satlab::ad
