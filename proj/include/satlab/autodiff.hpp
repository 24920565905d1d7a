#pragma once

// Recorded forward computation with exact reverse-mode gradients.
//
// A Tape owns every intermediate value produced while it is alive. Ops append one
// record each, so the record list is topologically ordered by construction and
// backward() simply walks it in reverse, visiting each record once.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

#include "satlab/param.hpp"
#include "satlab/tensor.hpp"

namespace satlab::ad {

enum class OpKind : std::uint8_t {
  leaf,
  matmul,
  unary,
  binary,
  scale,
  softmax,
  causal_mask,
  rms_norm,
  embedding,
  cross_entropy,
  rope,
  reshape,
  permute,
  concat,
  slice,
  sum,
  custom,
};

std::string_view op_name(OpKind kind);

enum class UnaryKind : std::uint8_t { relu, sigmoid, tanh, identity, gelu, exp, log, neg };
enum class BinaryKind : std::uint8_t { add, sub, mul, div };

/// Raised on misuse of a tape (foreign variables, repeated backward, non-scalar loss).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Tape;

/// Handle to one record on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::int32_t id = -1;

  bool valid() const noexcept { return tape != nullptr && id >= 0; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// View handed to a backward rule: upstream gradient, saved values, input accumulators.
template <typename T>
class BackwardContext {
 public:
  BackwardContext(Tape<T>& tape, std::int32_t node) : tape_(tape), node_(node) {}

  const Tensor<T>& output() const;
  const Tensor<T>& grad_output() const;
  const Tensor<T>& input(std::size_t i) const;
  bool needs_grad(std::size_t i) const;
  /// Gradient accumulator for input i (allocated as zeros on first use).
  Tensor<T>& grad_input(std::size_t i);

 private:
  Tape<T>& tape_;
  std::int32_t node_;
};

template <typename T>
using BackwardFn = std::function<void(BackwardContext<T>&)>;

template <typename T>
class Tape {
 public:
  /// With grad disabled no backward rules are stored; values only.
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const noexcept { return grad_enabled_; }

  /// A value that never receives a gradient.
  Var<T> constant(Tensor<T> value);
  /// A free leaf whose gradient can be read back with grad().
  Var<T> leaf(Tensor<T> value);
  /// A parameter leaf; the value is referenced, not copied, so the Param must outlive the tape.
  Var<T> param(const Param<T>& p);

  /// Appends a record. `fn` may be empty for ops without a gradient path.
  Var<T> record(OpKind kind, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn<T> fn);

  /// Reverse sweep from a scalar loss. Rejected if called twice on one tape.
  void backward(Var<T> loss);

  const Tensor<T>& value(Var<T> v) const;
  /// Gradient of a leaf or intermediate; zeros if no gradient reached it.
  Tensor<T> grad(Var<T> v) const;
  bool requires_grad(Var<T> v) const;
  OpKind kind(Var<T> v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Adds each parameter leaf's gradient into the matching Param::grad (matched by identity).
  void accumulate_param_grads(std::span<Param<T>* const> params) const;

 private:
  friend class BackwardContext<T>;

  struct Node {
    OpKind kind = OpKind::leaf;
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::int32_t> inputs;
    BackwardFn<T> backward;
    const Param<T>* source = nullptr;

    const Tensor<T>& value() const { return external ? *external : owned; }
  };

  void check(Var<T> v) const;
  Tensor<T>& grad_slot(std::int32_t id);

  bool grad_enabled_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->value(*this);
}

// ---- primitives -------------------------------------------------------------

/// Batched matrix product over the last two axes; batch axes broadcast.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

template <typename T>
Var<T> unary(UnaryKind kind, Var<T> a);
template <typename T>
Var<T> binary(BinaryKind kind, Var<T> a, Var<T> b);

template <typename T>
Var<T> relu(Var<T> a) { return unary(UnaryKind::relu, a); }
template <typename T>
Var<T> sigmoid(Var<T> a) { return unary(UnaryKind::sigmoid, a); }
template <typename T>
Var<T> tanh(Var<T> a) { return unary(UnaryKind::tanh, a); }
template <typename T>
Var<T> gelu(Var<T> a) { return unary(UnaryKind::gelu, a); }
template <typename T>
Var<T> exp(Var<T> a) { return unary(UnaryKind::exp, a); }
template <typename T>
Var<T> log(Var<T> a) { return unary(UnaryKind::log, a); }
template <typename T>
Var<T> add(Var<T> a, Var<T> b) { return binary(BinaryKind::add, a, b); }
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) { return binary(BinaryKind::sub, a, b); }
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) { return binary(BinaryKind::mul, a, b); }
template <typename T>
Var<T> div(Var<T> a, Var<T> b) { return binary(BinaryKind::div, a, b); }

/// Multiplication by a fixed constant.
template <typename T>
Var<T> scale(Var<T> a, T factor);

/// Max-subtracted softmax over the last axis.
template <typename T>
Var<T> softmax_lastdim(Var<T> a);

/// For [.., T, T] scores: entries with column > row are replaced by a large negative
/// finite value so a following softmax assigns them exactly zero weight.
template <typename T>
Var<T> causal_mask(Var<T> a);

/// x / sqrt(mean(x^2) + eps) * weight over the last axis.
template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> weight, T eps);

/// Row gather from a [V, d] table into [B, T, d].
template <typename T>
Var<T> embedding_lookup(Var<T> table, const TokenGrid& ids);

/// Mean token negative log-likelihood of [B, T, V] logits; returns a rank-0 tensor.
template <typename T>
Var<T> cross_entropy_mean(Var<T> logits, const TokenGrid& targets);

/// Rotary position embedding over [B, T, H, d_head]; rotates pairs (2i, 2i+1).
template <typename T>
Var<T> rope_apply(Var<T> x, std::span<const std::size_t> positions, double theta_base);

template <typename T>
Var<T> reshape(Var<T> a, Shape shape);
template <typename T>
Var<T> permute(Var<T> a, std::vector<std::size_t> axes);
/// Concatenation along the last axis; leading extents must agree.
template <typename T>
Var<T> concat_lastdim(Var<T> a, Var<T> b);
template <typename T>
Var<T> slice_lastdim(Var<T> a, std::size_t start, std::size_t length);
/// Sum of all entries as a rank-0 tensor.
template <typename T>
Var<T> sum_all(Var<T> a);

}  // namespace satlab::ad
