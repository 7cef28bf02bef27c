#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "comatch/tensor.hpp"

namespace comatch::tensor {

// Builds a scalar loss on the given tape from the current parameter values.
using LossFn = std::function<Tensor(Tape&)>;

struct GradCheckEntry {
  std::string name;
  double max_relative_error = 0.0;
};

// Compares tape gradients against central differences
// (f(p+eps) - f(p-eps)) / (2 eps), entry by entry, and returns the largest
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// Parameter values are restored before returning; their grads are left
// holding the analytic gradient.
double grad_check(const LossFn& f, std::span<Tensor> params, double eps = 1e-5);

// Same, one entry per named parameter group.
std::vector<GradCheckEntry> grad_check_groups(const LossFn& f, std::span<Tensor> params,
                                              std::span<const std::string> names, double eps = 1e-5);

}  // namespace comatch::tensor
