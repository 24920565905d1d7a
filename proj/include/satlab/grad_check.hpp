#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "satlab/param.hpp"

namespace satlab {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Coordinates to compare. Exhaustive params are always fully covered and every other
  /// param contributes at least one coordinate; the remainder is drawn at random.
  std::size_t samples = 200;
  std::uint64_t seed = 0;
  /// Names of params whose every coordinate must be checked.
  std::vector<std::string> exhaustive;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates = 0;
  /// Param names that had at least one coordinate checked.
  std::vector<std::string> covered;

  bool passed(double tolerance) const { return max_rel_err < tolerance; }
};

/// Evaluates the loss; when `backward` is true it must also refill every Param::grad
/// with the analytic gradient of that loss (zeroed first).
using LossFunction = std::function<double(bool backward)>;

/// Central-difference check of analytic gradients. Relative error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-8). Params are restored bit-exactly afterwards.
GradCheckReport grad_check(const LossFunction& loss, std::span<Param<double>* const> params,
                           const GradCheckOptions& options);

}  // namespace satlab
