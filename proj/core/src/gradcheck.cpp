#include "vqnerv/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "vqnerv/errors.hpp"
#include "vqnerv/rng.hpp"

namespace vqnerv {

GradCheckResult grad_check(const std::function<Var()>& loss_fn, ParameterSet& params, float eps,
                           int samples, std::uint64_t seed) {
  if (params.size() == 0) throw ContractError("grad_check: no parameters");
  params.zero_grad();
  Var loss = loss_fn();
  if (loss.value().size() != 1)
    throw ContractError("grad_check: loss must be scalar, got " + shape_str(loss.shape()));
  loss.backward();

  std::vector<std::pair<std::string, Var*>> entries;
  for (auto& [name, v] : params) entries.emplace_back(name, &v);

  GradCheckResult result;
  Rng rng(seed);
  NoGradGuard no_grad;
  for (int s = 0; s < samples; ++s) {
    auto& [name, p] = entries[rng.index(static_cast<int>(entries.size()))];
    const std::size_t idx = static_cast<std::size_t>(rng.index(static_cast<int>(p->value().size())));
    const double analytic = p->has_grad() ? p->grad()[idx] : 0.0;
    float& w = p->mutable_value()[idx];
    const float original = w;
    w = original + eps;
    const double up = loss_fn().value()[0];
    w = original - eps;
    const double down = loss_fn().value()[0];
    w = original;
    const double numeric = (up - down) / (2.0 * static_cast<double>(eps));
    const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
    if (err > result.max_error || result.worst_parameter.empty()) {
      result.max_error = std::max(result.max_error, err);
      if (err >= result.max_error) result.worst_parameter = name;
    }
    ++result.samples;
  }
  return result;
}

}  // namespace vqnerv
