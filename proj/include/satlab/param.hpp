#pragma once

#include <string>

#include "satlab/tensor.hpp"

namespace satlab {

/// A learnable tensor with its gradient accumulator.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  /// Whether decoupled weight decay applies (false for norm scales, lambdas, gate projections).
  bool decay = true;

  Param() = default;
  Param(std::string n, Tensor<T> v, bool decayed)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), decay(decayed) {}

  void zero_grad() { grad.fill(T{0}); }
};

}  // namespace satlab
