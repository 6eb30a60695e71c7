#pragma once

#include <ostream>
#include <vector>

#include "vqnerv/autograd.hpp"

namespace vqnerv {

struct LossWeights {
  float alpha = 0.7f;  // L1 share of the reconstruction loss
  float beta = 0.25f;  // VQ commitment weight
};

struct SsimSettings {
  int window = 11;
  float sigma = 1.5f;
  float c1 = 0.01f * 0.01f;
  float c2 = 0.03f * 0.03f;
};

// Normalized 1-D Gaussian taps.
std::vector<float> gaussian_window(int size, float sigma);

// Per-position SSIM over [C,H,W] inputs with a 'valid' Gaussian window:
// [C, H-k+1, W-k+1]. Images smaller than the window shrink it (with a warning).
Var ssim_map(const Var& x, const Var& y, const SsimSettings& settings = {});

// Mean SSIM as a scalar metric.
double ssim(const Tensor& x, const Tensor& y, const SsimSettings& settings = {});

// alpha * mean|x_hat - x| + (1 - alpha) * (1 - SSIM(x_hat, x)).
Var reconstruction_loss(const Var& x_hat, const Tensor& x, float alpha);

// Reconstruction loss restricted to undistorted pixels. `mask` is [H,W] with
// 1 marking distorted pixels. The L1 term is weighted by (1 - M) and averaged
// over all elements; SSIM windows containing any distorted pixel are dropped
// from the (1 - SSIM) average.
Var inpainting_loss(const Var& x_hat, const Tensor& x, const Tensor& mask, float alpha);

constexpr double kPsnrCap = 100.0;

// 10 log10(1 / MSE) for [0,1] images; identical inputs report kPsnrCap.
double psnr(const Tensor& x_hat, const Tensor& x);
double mse(const Tensor& a, const Tensor& b);

struct FrameMetrics {
  int frame_index = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

void write_metrics_csv(std::ostream& os, const std::vector<FrameMetrics>& rows);

}  // namespace vqnerv
