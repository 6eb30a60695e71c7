#include "vqnerv/optim.hpp"

#include <cmath>
#include <numbers>

#include "vqnerv/errors.hpp"

namespace vqnerv {

void Adam::step(ParameterSet& params, float lr) {
  for (auto& [name, p] : params) {
    if (p.has_grad() && !p.grad().all_finite())
      throw NumericError("non-finite gradient in parameter '" + name + "'");
  }
  ++step_;
  const float b1 = settings_.beta1, b2 = settings_.beta2;
  const float c1 = 1.0f - std::pow(b1, static_cast<float>(step_));
  const float c2 = 1.0f - std::pow(b2, static_cast<float>(step_));
  for (auto& [name, p] : params) {
    if (!p.has_grad()) continue;
    Moments& mo = moments_[name];
    if (mo.m.empty()) {
      mo.m = Tensor::zeros(p.shape());
      mo.v = Tensor::zeros(p.shape());
    }
    Tensor& w = p.mutable_value();
    const Tensor& g = p.grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const float gi = g[i] + settings_.weight_decay * w[i];
      mo.m[i] = b1 * mo.m[i] + (1.0f - b1) * gi;
      mo.v[i] = b2 * mo.v[i] + (1.0f - b2) * gi * gi;
      const float mhat = mo.m[i] / c1;
      const float vhat = mo.v[i] / c2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + settings_.eps);
    }
  }
}

float cosine_lr(long step, long total_steps, float base_lr) {
  if (total_steps <= 0) throw ParameterError("cosine_lr: total_steps must be positive");
  if (step < 0 || step > total_steps) throw ParameterError("cosine_lr: step outside [0, total_steps]");
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return static_cast<float>(0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac)));
}

}  // namespace vqnerv
