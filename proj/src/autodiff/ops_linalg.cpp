#include <Eigen/Core>
#include <fmt/format.h>

#include <numeric>

#include "broadcast.hpp"
#include "satlab/autodiff.hpp"

namespace satlab::ad {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct MatmulPlan {
  std::size_t m = 0, k = 0, n = 0;
  Shape batch;                         // broadcast batch extents
  std::vector<std::size_t> sa, sb;     // batch strides in matrices
  bool flat_b = false;                 // b is a plain matrix: fold a's batch into rows
};

MatmulPlan plan_matmul(const Shape& a, const Shape& b) {
  if (a.size() < 2 || b.size() < 2 || a[a.size() - 1] != b[b.size() - 2]) {
    throw ShapeError(fmt::format("matmul shape mismatch: {} x {}", to_string(a), to_string(b)));
  }
  MatmulPlan p;
  p.m = a[a.size() - 2];
  p.k = a[a.size() - 1];
  p.n = b[b.size() - 1];
  const Shape ba(a.begin(), a.end() - 2);
  const Shape bb(b.begin(), b.end() - 2);
  try {
    p.batch = broadcast_shapes(ba, bb);
  } catch (const ShapeError&) {
    throw ShapeError(fmt::format("matmul batch extents not broadcastable: {} x {}", to_string(a),
                                 to_string(b)));
  }
  p.flat_b = bb.empty();
  p.sa = detail::broadcast_strides(ba, p.batch);
  p.sb = detail::broadcast_strides(bb, p.batch);
  return p;
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  const Tensor<T>& x = a.value();
  const Tensor<T>& w = b.value();
  const MatmulPlan p = plan_matmul(x.shape(), w.shape());
  Shape out_shape = p.batch;
  out_shape.push_back(p.m);
  out_shape.push_back(p.n);
  Tensor<T> y(out_shape);
  const std::size_t a_mat = p.m * p.k;
  const std::size_t b_mat = p.k * p.n;
  const std::size_t y_mat = p.m * p.n;
  if (p.flat_b) {
    const std::size_t rows = x.size() / p.k;
    MatMap<T>(y.data(), rows, p.n).noalias() =
        ConstMatMap<T>(x.data(), rows, p.k) * ConstMatMap<T>(w.data(), p.k, p.n);
  } else {
    detail::for_each_broadcast(p.batch, p.sa, p.sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      MatMap<T>(y.data() + o * y_mat, p.m, p.n).noalias() =
          ConstMatMap<T>(x.data() + ia * a_mat, p.m, p.k) *
          ConstMatMap<T>(w.data() + ib * b_mat, p.k, p.n);
    });
  }
  return a.tape->record(OpKind::matmul, std::move(y), {a, b}, [p, a_mat, b_mat, y_mat](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    const auto& xa = ctx.input(0);
    const auto& xb = ctx.input(1);
    Tensor<T>* ga = ctx.needs_grad(0) ? &ctx.grad_input(0) : nullptr;
    Tensor<T>* gb = ctx.needs_grad(1) ? &ctx.grad_input(1) : nullptr;
    if (p.flat_b) {
      const std::size_t rows = xa.size() / p.k;
      ConstMatMap<T> G(g.data(), rows, p.n);
      if (ga) {
        MatMap<T>(ga->data(), rows, p.k).noalias() +=
            G * ConstMatMap<T>(xb.data(), p.k, p.n).transpose();
      }
      if (gb) {
        MatMap<T>(gb->data(), p.k, p.n).noalias() +=
            ConstMatMap<T>(xa.data(), rows, p.k).transpose() * G;
      }
      return;
    }
    detail::for_each_broadcast(p.batch, p.sa, p.sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      ConstMatMap<T> G(g.data() + o * y_mat, p.m, p.n);
      if (ga) {
        MatMap<T>(ga->data() + ia * a_mat, p.m, p.k).noalias() +=
            G * ConstMatMap<T>(xb.data() + ib * b_mat, p.k, p.n).transpose();
      }
      if (gb) {
        MatMap<T>(gb->data() + ib * b_mat, p.k, p.n).noalias() +=
            ConstMatMap<T>(xa.data() + ia * a_mat, p.m, p.k).transpose() * G;
      }
    });
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> y = a.value();
  y.reshape(std::move(shape));
  return a.tape->record(OpKind::reshape, std::move(y), {a}, [](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    auto& gx = ctx.grad_input(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

template <typename T>
Var<T> permute(Var<T> a, std::vector<std::size_t> axes) {
  const Tensor<T>& x = a.value();
  const std::size_t rank = x.rank();
  {
    std::vector<bool> seen(rank, false);
    bool ok = axes.size() == rank;
    for (auto ax : axes) {
      if (!ok || ax >= rank || seen[ax]) {
        ok = false;
        break;
      }
      seen[ax] = true;
    }
    if (!ok) throw ShapeError(fmt::format("invalid permutation for shape {}", to_string(x.shape())));
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_strides[d - 1] = in_strides[d] * x.shape()[d];
  Shape out_shape(rank);
  std::vector<std::size_t> strides(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    out_shape[d] = x.shape()[axes[d]];
    strides[d] = in_strides[axes[d]];
  }
  Tensor<T> y(out_shape);
  const std::vector<std::size_t> zero(rank, 0);
  detail::for_each_broadcast(out_shape, strides, zero,
                             [&](std::size_t o, std::size_t i, std::size_t) { y[o] = x[i]; });
  return a.tape->record(OpKind::permute, std::move(y), {a}, [out_shape, strides](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    auto& gx = ctx.grad_input(0);
    const std::vector<std::size_t> zero(out_shape.size(), 0);
    detail::for_each_broadcast(out_shape, strides, zero,
                               [&](std::size_t o, std::size_t i, std::size_t) { gx[i] += g[o]; });
  });
}

template <typename T>
Var<T> concat_lastdim(Var<T> a, Var<T> b) {
  const Tensor<T>& x = a.value();
  const Tensor<T>& z = b.value();
  if (x.rank() != z.rank() || x.rank() == 0 ||
      !std::equal(x.shape().begin(), x.shape().end() - 1, z.shape().begin())) {
    throw ShapeError(fmt::format("concat_lastdim: {} and {}", to_string(x.shape()), to_string(z.shape())));
  }
  const std::size_t na = x.shape().back();
  const std::size_t nb = z.shape().back();
  const std::size_t rows = x.size() / na;
  Shape out_shape = x.shape();
  out_shape.back() = na + nb;
  Tensor<T> y(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(x.data() + r * na, na, y.data() + r * (na + nb));
    std::copy_n(z.data() + r * nb, nb, y.data() + r * (na + nb) + na);
  }
  return a.tape->record(OpKind::concat, std::move(y), {a, b}, [na, nb, rows](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    if (ctx.needs_grad(0)) {
      auto& ga = ctx.grad_input(0);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < na; ++j) ga[r * na + j] += g[r * (na + nb) + j];
    }
    if (ctx.needs_grad(1)) {
      auto& gb = ctx.grad_input(1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < nb; ++j) gb[r * nb + j] += g[r * (na + nb) + na + j];
    }
  });
}

template <typename T>
Var<T> slice_lastdim(Var<T> a, std::size_t start, std::size_t length) {
  const Tensor<T>& x = a.value();
  if (x.rank() == 0 || length == 0 || start + length > x.shape().back()) {
    throw ShapeError(fmt::format("slice [{}, {}) out of range for shape {}", start, start + length,
                                 to_string(x.shape())));
  }
  const std::size_t width = x.shape().back();
  const std::size_t rows = x.size() / width;
  Shape out_shape = x.shape();
  out_shape.back() = length;
  Tensor<T> y(out_shape);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.data() + r * width + start, length, y.data() + r * length);
  return a.tape->record(OpKind::slice, std::move(y), {a}, [start, length, width, rows](BackwardContext<T>& ctx) {
    const auto& g = ctx.grad_output();
    auto& gx = ctx.grad_input(0);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < length; ++j) gx[r * width + start + j] += g[r * length + j];
  });
}

#define SATLAB_INSTANTIATE(T)                                              \
  template Var<T> matmul(Var<T>, Var<T>);                                  \
  template Var<T> reshape(Var<T>, Shape);                                  \
  template Var<T> permute(Var<T>, std::vector<std::size_t>);               \
  template Var<T> concat_lastdim(Var<T>, Var<T>);                          \
  template Var<T> slice_lastdim(Var<T>, std::size_t, std::size_t);

SATLAB_INSTANTIATE(float)
SATLAB_INSTANTIATE(double)
#undef SATLAB_INSTANTIATE

}  // namespace satlab::ad
