#pragma once

#include <span>
#include <vector>

#include "vqnerv/autograd.hpp"

// Differentiable operations over [C,H,W] feature maps and flat tensors.
// Every op validates shapes and throws DimensionError on mismatch.
namespace vqnerv::ops {

// Elementwise.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_scalar(const Var& a, float s);
Var mul_scalar(const Var& a, float s);
Var mul_const(const Var& a, const Tensor& c);  // c carries no gradient
Var square(const Var& a);
Var abs(const Var& a);
Var exp(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var gelu(const Var& a);  // exact erf form
Var stop_gradient(const Var& a);

// Reductions to a single-element tensor of shape [1].
Var sum(const Var& a);
Var mean(const Var& a);

// conv2d over [C,H,W] with weight [K,C,kh,kw]; bias [K] may be undefined.
Var conv2d(const Var& input, const Var& weight, const Var& bias, int stride, int padding);

// [C*r*r,H,W] -> [C,H*r,W*r], PyTorch channel layout.
Var pixel_shuffle(const Var& input, int r);
Var pixel_unshuffle(const Var& input, int r);

Var concat_channels(const std::vector<Var>& parts);
Var slice_channels(const Var& input, int begin, int count);

// Normalizes across channels at every spatial position, then applies the
// per-channel affine (gamma, beta of shape [C]).
Var layer_norm_channels(const Var& input, const Var& gamma, const Var& beta, float eps = 1e-6f);

// Separable 'valid' correlation with a symmetric 1-D kernel applied along H
// then W, independently per channel: [C,H,W] -> [C,H-k+1,W-k+1].
Var separable_filter_valid(const Var& input, std::span<const float> kernel);

// Raw (non-recording) kernels shared with code that works on plain tensors.
Tensor conv2d_forward(const Tensor& input, const Tensor& weight, const Tensor* bias, int stride,
                      int padding);
Tensor pixel_shuffle_forward(const Tensor& input, int r);
Tensor pixel_unshuffle_forward(const Tensor& input, int r);

}  // namespace vqnerv::ops
