#pragma once

#include <map>
#include <string>

#include "vqnerv/autograd.hpp"

namespace vqnerv {

struct AdamSettings {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.0f;
};

// Adam with bias correction. Moments are keyed by parameter name so the
// optimizer survives parameter-set reordering.
class Adam {
 public:
  explicit Adam(AdamSettings settings = {}) : settings_(settings) {}

  // Applies one update with learning rate `lr` using the gradients currently
  // held by `params`. Parameters without a gradient are skipped. Throws
  // NumericError naming the first parameter whose gradient is not finite.
  void step(ParameterSet& params, float lr);

  long step_count() const { return step_; }
  const AdamSettings& settings() const { return settings_; }

 private:
  struct Moments {
    Tensor m, v;
  };
  AdamSettings settings_;
  long step_ = 0;
  std::map<std::string, Moments> moments_;
};

// Cosine decay from base_lr at step 0 to 0 at total_steps.
float cosine_lr(long step, long total_steps, float base_lr);

}  // namespace vqnerv
