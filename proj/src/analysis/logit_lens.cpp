#include <fmt/format.h>

#include <cmath>

#include "satlab/analysis.hpp"

namespace satlab {

template <typename T>
LogitLensReport logit_lens(const ModelWeights<T>& weights, std::span<const Batch> data, const std::string& model) {
  if (data.empty()) throw std::invalid_argument("logit lens: no data");
  const std::size_t depth = weights.config.n_layers + 1;
  std::vector<double> nll(depth, 0.0);
  std::size_t tokens = 0;
  for (const auto& batch : data) {
    ad::Tape<T> tape(false);
    auto trace = forward_graph(tape, weights, batch.inputs);
    for (std::size_t l = 0; l + 1 < depth; ++l) {
      nll[l] += token_nll_sum(decode_hidden(tape, weights, trace.hidden[l]).value(), batch.targets);
    }
    nll[depth - 1] += token_nll_sum(trace.logits.value(), batch.targets);
    tokens += batch.targets.size();
  }
  LogitLensReport r;
  for (std::size_t l = 0; l < depth; ++l) {
    const double loss = nll[l] / static_cast<double>(tokens);
    r.rows.push_back({model, l, loss, std::exp(loss)});
  }
  return r;
}

LogitLensReport compare_logit_lens(LogitLensReport a, LogitLensReport b) {
  if (a.rows.size() != b.rows.size()) {
    throw std::invalid_argument(fmt::format("logit lens comparison: {} layers vs {}", a.rows.size(), b.rows.size()));
  }
  if (!a.rows.empty() && a.rows.front().model == b.rows.front().model) {
    throw std::invalid_argument("logit lens comparison: both reports carry the same model label");
  }
  a.rows.insert(a.rows.end(), b.rows.begin(), b.rows.end());
  return a;
}

template LogitLensReport logit_lens<float>(const ModelWeights<float>&, std::span<const Batch>, const std::string&);
template LogitLensReport logit_lens<double>(const ModelWeights<double>&, std::span<const Batch>, const std::string&);

}  // namespace satlab
