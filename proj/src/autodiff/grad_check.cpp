#include "satlab/grad_check.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

namespace satlab {

GradCheckReport grad_check(const LossFunction& loss, std::span<Param<double>* const> params,
                           const GradCheckOptions& options) {
  if (!(options.eps >= 1e-6 && options.eps <= 1e-4)) {
    throw std::invalid_argument(fmt::format("grad_check eps {} outside [1e-6, 1e-4]", options.eps));
  }
  loss(true);
  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.size());
  for (const auto* p : params) analytic.push_back(p->grad);

  // (param index, coordinate) pairs, deduplicated and in a fixed order.
  std::set<std::pair<std::size_t, std::size_t>> picks;
  std::mt19937_64 rng(options.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    const auto& p = *params[pi];
    const bool full = std::find(options.exhaustive.begin(), options.exhaustive.end(), p.name) !=
                      options.exhaustive.end();
    if (full) {
      for (std::size_t i = 0; i < p.value.size(); ++i) picks.emplace(pi, i);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, p.value.size() - 1);
      picks.emplace(pi, pick(rng));
    }
  }
  std::size_t total = 0;
  for (const auto* p : params) total += p->value.size();
  const std::size_t target = std::min(std::max(options.samples, picks.size()), total);
  if (total > 0) {
    while (picks.size() < target) {
      // Weight params by size so large matrices are sampled proportionally.
      std::uniform_int_distribution<std::size_t> flat(0, total - 1);
      std::size_t k = flat(rng);
      std::size_t pi = 0;
      while (k >= params[pi]->value.size()) k -= params[pi++]->value.size();
      picks.emplace(pi, k);
    }
  }

  GradCheckReport report;
  std::set<std::string> covered;
  for (const auto& [pi, i] : picks) {
    auto& p = *params[pi];
    const double saved = p.value[i];
    p.value[i] = saved + options.eps;
    const double up = loss(false);
    p.value[i] = saved - options.eps;
    const double down = loss(false);
    p.value[i] = saved;
    const double numeric = (up - down) / (2.0 * options.eps);
    const double a = analytic[pi][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    ++report.coordinates;
    covered.insert(p.name);
    if (report.worst_param.empty() || rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst_param = p.name;
      report.worst_index = i;
      report.worst_analytic = a;
      report.worst_numeric = numeric;
    }
  }
  report.covered.assign(covered.begin(), covered.end());
  return report;
}

}  // namespace satlab
