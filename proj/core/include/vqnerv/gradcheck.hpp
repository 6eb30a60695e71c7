#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "vqnerv/autograd.hpp"

namespace vqnerv {

struct GradCheckResult {
  double max_error = 0.0;  // max |analytic - numeric| / max(1, |analytic|)
  int samples = 0;
  std::string worst_parameter;
};

// Compares analytic gradients against central differences on `samples`
// randomly drawn coordinates across `params`. `loss_fn` must rebuild the graph
// on every call and return a single-element Var.
GradCheckResult grad_check(const std::function<Var()>& loss_fn, ParameterSet& params, float eps,
                           int samples = 32, std::uint64_t seed = 7);

}  // namespace vqnerv
