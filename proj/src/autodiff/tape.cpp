#include <fmt/format.h>

#include "satlab/autodiff.hpp"

namespace satlab::ad {

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::unary: return "unary";
    case OpKind::binary: return "binary";
    case OpKind::scale: return "scale";
    case OpKind::softmax: return "softmax";
    case OpKind::causal_mask: return "causal_mask";
    case OpKind::rms_norm: return "rms_norm";
    case OpKind::embedding: return "embedding";
    case OpKind::cross_entropy: return "cross_entropy";
    case OpKind::rope: return "rope";
    case OpKind::reshape: return "reshape";
    case OpKind::permute: return "permute";
    case OpKind::concat: return "concat";
    case OpKind::slice: return "slice";
    case OpKind::sum: return "sum";
    case OpKind::custom: return "custom";
  }
  return "unknown";
}

template <typename T>
const Tensor<T>& BackwardContext<T>::output() const {
  return tape_.nodes_[node_].value();
}

template <typename T>
const Tensor<T>& BackwardContext<T>::grad_output() const {
  return tape_.nodes_[node_].grad;
}

template <typename T>
const Tensor<T>& BackwardContext<T>::input(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].value();
}

template <typename T>
bool BackwardContext<T>::needs_grad(std::size_t i) const {
  return tape_.nodes_[tape_.nodes_[node_].inputs.at(i)].requires_grad;
}

template <typename T>
Tensor<T>& BackwardContext<T>::grad_input(std::size_t i) {
  return tape_.grad_slot(tape_.nodes_[node_].inputs.at(i));
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::param(const Param<T>& p) {
  Node n;
  n.external = &p.value;
  n.requires_grad = grad_enabled_;
  n.source = &p;
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
void Tape<T>::check(Var<T> v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw TapeError("variable does not belong to this tape");
  }
}

template <typename T>
Var<T> Tape<T>::record(OpKind kind, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                       BackwardFn<T> fn) {
  Node n;
  n.kind = kind;
  n.owned = std::move(value);
  n.inputs.reserve(inputs.size());
  bool any = false;
  for (auto v : inputs) {
    check(v);
    n.inputs.push_back(v.id);
    any = any || nodes_[v.id].requires_grad;
  }
  if (grad_enabled_ && any && fn) {
    n.requires_grad = true;
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var<T>{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
Tensor<T>& Tape<T>::grad_slot(std::int32_t id) {
  Node& n = nodes_[id];
  if (!n.has_grad) {
    n.grad = Tensor<T>(n.value().shape(), T{0});
    n.has_grad = true;
  }
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  check(loss);
  if (backward_done_) throw TapeError("backward already ran on this tape; build a new tape");
  const auto& lv = nodes_[loss.id].value();
  if (lv.size() != 1) {
    throw TapeError(fmt::format("backward needs a scalar loss, got shape {}",
                                to_string(lv.shape())));
  }
  backward_done_ = true;
  if (!nodes_[loss.id].requires_grad) return;
  grad_slot(loss.id).fill(T{1});
  for (std::int32_t id = loss.id; id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.backward) continue;
    BackwardContext<T> ctx(*this, id);
    n.backward(ctx);
  }
}

template <typename T>
const Tensor<T>& Tape<T>::value(Var<T> v) const {
  check(v);
  return nodes_[v.id].value();
}

template <typename T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
  check(v);
  const Node& n = nodes_[v.id];
  if (n.has_grad) return n.grad;
  return Tensor<T>(n.value().shape(), T{0});
}

template <typename T>
bool Tape<T>::requires_grad(Var<T> v) const {
  check(v);
  return nodes_[v.id].requires_grad;
}

template <typename T>
OpKind Tape<T>::kind(Var<T> v) const {
  check(v);
  return nodes_[v.id].kind;
}

template <typename T>
void Tape<T>::accumulate_param_grads(std::span<Param<T>* const> params) const {
  for (const Node& n : nodes_) {
    if (n.source == nullptr || !n.has_grad) continue;
    for (Param<T>* p : params) {
      if (p != n.source) continue;
      for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad[i] += n.grad[i];
      break;
    }
  }
}

template class BackwardContext<float>;
template class BackwardContext<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace satlab::ad
