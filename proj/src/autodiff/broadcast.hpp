#pragma once

#include <cstddef>
#include <vector>

#include "satlab/tensor.hpp"

namespace satlab::ad::detail {

/// Element strides of `in` aligned to `out` (right-aligned, 0 on stretched axes).
inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t d_in = in.size() - 1 - k;
    const std::size_t d_out = out.size() - 1 - k;
    strides[d_out] = in[d_in] == 1 ? 0 : s;
    s *= in[d_in];
  }
  return strides;
}

/// Calls f(out_index, a_index, b_index) for every element of `out` in row-major order.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                        const std::vector<std::size_t>& sb, F&& f) {
  const std::size_t rank = out.size();
  const std::size_t n = numel(out);
  if (rank == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out[rank - 1];
  const std::size_t ia_step = sa[rank - 1];
  const std::size_t ib_step = sb[rank - 1];
  std::vector<std::size_t> idx(rank, 0);
  std::size_t ia = 0;
  std::size_t ib = 0;
  for (std::size_t o = 0; o < n; o += inner) {
    for (std::size_t i = 0; i < inner; ++i) f(o + i, ia + i * ia_step, ib + i * ib_step);
    for (std::size_t d = rank - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

}  // namespace satlab::ad::detail
