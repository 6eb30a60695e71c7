#include "vqnerv/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>

#include <spdlog/spdlog.h>

#include "vqnerv/errors.hpp"
#include "vqnerv/ops.hpp"

namespace vqnerv {

std::vector<float> gaussian_window(int size, float sigma) {
  std::vector<float> taps(size);
  const float center = 0.5f * static_cast<float>(size - 1);
  double total = 0.0;
  for (int i = 0; i < size; ++i) {
    const float d = static_cast<float>(i) - center;
    taps[i] = std::exp(-d * d / (2.0f * sigma * sigma));
    total += taps[i];
  }
  for (float& t : taps) t = static_cast<float>(t / total);
  return taps;
}

namespace {

int effective_window(const Shape& shape, int window) {
  const int limit = std::min(shape[1], shape[2]);
  if (window <= limit) return window;
  int w = limit % 2 ? limit : limit - 1;
  w = std::max(w, 1);
  spdlog::warn("ssim: image {} smaller than window {}, using {}", shape_str(shape), window, w);
  return w;
}

}  // namespace

Var ssim_map(const Var& x, const Var& y, const SsimSettings& settings) {
  require_same_shape(x.value(), y.value(), "ssim");
  require_rank(x.value(), 3, "ssim");
  const std::vector<float> taps =
      gaussian_window(effective_window(x.shape(), settings.window), settings.sigma);
  using namespace ops;
  Var mu_x = separable_filter_valid(x, taps);
  Var mu_y = separable_filter_valid(y, taps);
  Var mu_xx = mul(mu_x, mu_x);
  Var mu_yy = mul(mu_y, mu_y);
  Var mu_xy = mul(mu_x, mu_y);
  Var sigma_xx = sub(separable_filter_valid(mul(x, x), taps), mu_xx);
  Var sigma_yy = sub(separable_filter_valid(mul(y, y), taps), mu_yy);
  Var sigma_xy = sub(separable_filter_valid(mul(x, y), taps), mu_xy);
  Var num = mul(add_scalar(mul_scalar(mu_xy, 2.0f), settings.c1),
                add_scalar(mul_scalar(sigma_xy, 2.0f), settings.c2));
  Var den = mul(add_scalar(add(mu_xx, mu_yy), settings.c1),
                add_scalar(add(sigma_xx, sigma_yy), settings.c2));
  return div(num, den);
}

double ssim(const Tensor& x, const Tensor& y, const SsimSettings& settings) {
  NoGradGuard guard;
  const Tensor map = ssim_map(Var(x), Var(y), settings).value();
  return map.sum() / static_cast<double>(map.size());
}

Var reconstruction_loss(const Var& x_hat, const Tensor& x, float alpha) {
  require_same_shape(x_hat.value(), x, "reconstruction_loss");
  if (alpha < 0.0f || alpha > 1.0f) throw ParameterError("reconstruction_loss: alpha outside [0,1]");
  Var target(x);
  Var l1 = ops::mean(ops::abs(ops::sub(x_hat, target)));
  if (alpha == 1.0f) return l1;
  Var dssim = ops::add_scalar(ops::mul_scalar(ops::mean(ssim_map(x_hat, target)), -1.0f), 1.0f);
  return ops::add(ops::mul_scalar(l1, alpha), ops::mul_scalar(dssim, 1.0f - alpha));
}

Var inpainting_loss(const Var& x_hat, const Tensor& x, const Tensor& mask, float alpha) {
  require_same_shape(x_hat.value(), x, "inpainting_loss");
  require_rank(mask, 2, "inpainting_loss mask");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (mask.dim(0) != h || mask.dim(1) != w)
    throw DimensionError("inpainting_loss: mask " + shape_str(mask.shape()) +
                         " does not match frame " + shape_str(x.shape()));
  Tensor keep(x.shape());
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) keep.at(ch, i, j) = 1.0f - mask[static_cast<std::size_t>(i) * w + j];
  Var target(x);
  Var l1 = ops::mean(ops::mul_const(ops::abs(ops::sub(x_hat, target)), keep));
  if (alpha == 1.0f) return l1;

  Var map = ssim_map(x_hat, target);
  const int k = h - map.dim(1) + 1;
  const int oh = map.dim(1), ow = map.dim(2);
  // Prefix sums over the mask locate windows with any distorted pixel.
  std::vector<double> integral(static_cast<std::size_t>(h + 1) * (w + 1), 0.0);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      integral[(i + 1) * (w + 1) + j + 1] = mask[static_cast<std::size_t>(i) * w + j] +
                                            integral[i * (w + 1) + j + 1] +
                                            integral[(i + 1) * (w + 1) + j] -
                                            integral[i * (w + 1) + j];
  Tensor window_keep(map.shape());
  for (int i = 0; i < oh; ++i)
    for (int j = 0; j < ow; ++j) {
      const double hits = integral[(i + k) * (w + 1) + j + k] - integral[i * (w + 1) + j + k] -
                          integral[(i + k) * (w + 1) + j] + integral[i * (w + 1) + j];
      const float keep_window = hits > 0.5 ? 0.0f : 1.0f;
      for (int ch = 0; ch < c; ++ch) window_keep.at(ch, i, j) = keep_window;
    }
  Var dssim_map = ops::add_scalar(ops::mul_scalar(map, -1.0f), 1.0f);
  Var dssim = ops::mean(ops::mul_const(dssim_map, window_keep));
  return ops::add(ops::mul_scalar(l1, alpha), ops::mul_scalar(dssim, 1.0f - alpha));
}

double mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

double psnr(const Tensor& x_hat, const Tensor& x) {
  const double err = mse(x_hat, x);
  if (err <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / err));
}

void write_metrics_csv(std::ostream& os, const std::vector<FrameMetrics>& rows) {
  os << "frame_index,psnr_db,ssim\n";
  for (const FrameMetrics& r : rows)
    os << r.frame_index << ',' << std::fixed << std::setprecision(4) << r.psnr_db << ','
       << std::setprecision(6) << r.ssim << '\n';
  os.unsetf(std::ios::fixed);
}

}  // namespace vqnerv
