#include <fmt/format.h>

#include <cmath>

#include "satlab/training.hpp"

namespace satlab {

template <typename T>
double token_nll_sum(const Tensor<T>& logits, const TokenGrid& targets) {
  if (logits.rank() != 3 || logits.extent(0) != targets.batch || logits.extent(1) != targets.length) {
    throw std::invalid_argument(fmt::format("token_nll_sum: logits {} do not match targets [{}, {}]",
                                            to_string(logits.shape()), targets.batch, targets.length));
  }
  const std::size_t vocab = logits.extent(2);
  double total = 0.0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    const T* row = logits.data() + r * vocab;
    double mx = -INFINITY;
    for (std::size_t k = 0; k < vocab; ++k) mx = std::max(mx, static_cast<double>(row[k]));
    double s = 0.0;
    for (std::size_t k = 0; k < vocab; ++k) s += std::exp(static_cast<double>(row[k]) - mx);
    const auto y = targets.ids[r];
    if (y < 0 || static_cast<std::size_t>(y) >= vocab) {
      throw std::out_of_range(fmt::format("token_nll_sum: target {} outside vocabulary of {}", y, vocab));
    }
    total += mx + std::log(s) - static_cast<double>(row[y]);
  }
  return total;
}

template <typename T>
EvalResult evaluate_perplexity(const ModelWeights<T>& weights, std::span<const Batch> data,
                               const ForwardOptions& options) {
  if (data.empty()) throw std::invalid_argument("evaluate_perplexity: no data");
  double nll = 0.0;
  std::size_t tokens = 0;
  for (const auto& batch : data) {
    nll += token_nll_sum(forward(weights, batch.inputs, options), batch.targets);
    tokens += batch.targets.size();
  }
  EvalResult r;
  r.tokens = tokens;
  r.loss = nll / static_cast<double>(tokens);
  r.perplexity = std::exp(r.loss);
  return r;
}

template double token_nll_sum<float>(const Tensor<float>&, const TokenGrid&);
template double token_nll_sum<double>(const Tensor<double>&, const TokenGrid&);
template EvalResult evaluate_perplexity<float>(const ModelWeights<float>&, std::span<const Batch>,
                                               const ForwardOptions&);
template EvalResult evaluate_perplexity<double>(const ModelWeights<double>&, std::span<const Batch>,
                                                const ForwardOptions&);

}  // namespace satlab
