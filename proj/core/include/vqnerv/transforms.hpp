#pragma once

#include <string>
#include <utility>

#include "vqnerv/autograd.hpp"
#include "vqnerv/rng.hpp"

namespace vqnerv {

// Orthonormal 2-D Haar analysis. Each 2x2 patch (a b / c d) maps to
//   LL = (a+b+c+d)/2, LH = (a-b+c-d)/2, HL = (a+b-c-d)/2, HH = (a-b-c+d)/2
// and output channels are ordered [LL x C, LH x C, HL x C, HH x C].
Tensor haar_forward(const Tensor& x);
Tensor haar_inverse(const Tensor& y);
Tensor haar_forward(const Tensor& x, int levels);
Tensor haar_inverse(const Tensor& y, int levels);

// Recording versions; the transform is orthogonal so each one's adjoint is
// the other.
Var haar_forward(const Var& x, int levels = 1);
Var haar_inverse(const Var& y, int levels = 1);

struct CouplingSettings {
  int split_a = 0;        // channels of the x stream
  int split_b = 0;        // channels of the f stream
  int hidden = 4;         // subnet hidden width
  int kernel = 1;         // subnet kernel size (odd)
  float scale_clamp = 5;  // s1 is passed through clamp*tanh(s/clamp); 0 disables
};

// Affine coupling block:
//   v1 = x + t2(f)
//   v2 = f * exp(s1(v1)) + t1(v1)
// with closed-form inverse. Each subnet is conv -> GELU -> conv without bias;
// the final conv starts at zero so a fresh block is the identity.
class CouplingBlock {
 public:
  CouplingBlock() = default;
  CouplingBlock(ParameterSet& params, const std::string& prefix, CouplingSettings settings,
                Rng& rng);

  std::pair<Var, Var> forward(const Var& x, const Var& f) const;   // (v1, v2)
  std::pair<Var, Var> inverse(const Var& v1, const Var& v2) const;  // (f_hat, x_hat)

  Var s1(const Var& v1) const;
  Var t1(const Var& v1) const;
  Var t2(const Var& f) const;

  const CouplingSettings& settings() const { return settings_; }
  std::size_t parameter_count() const;

  // Kaiming-style fill of every subnet weight, including the zero-initialized
  // output layers. Used to exercise the inverse on generic weights.
  void randomize(Rng& rng, float scale = 1.0f);

 private:
  struct Subnet {
    Var first, second;
  };
  Var run(const Subnet& net, const Var& input) const;
  Subnet make_subnet(ParameterSet& params, const std::string& name, int in, int out, Rng& rng);

  CouplingSettings settings_;
  Subnet s1_, t1_, t2_;
};

}  // namespace vqnerv
