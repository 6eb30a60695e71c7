#include "vqnerv/ops.hpp"

#include <Eigen/Core>
#include <cmath>
#include <string>

#include "vqnerv/errors.hpp"

namespace vqnerv::ops {

namespace {

using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMajor>;
using CMapRM = Eigen::Map<const RowMajor>;

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  const float* src = a.ptr();
  float* dst = out.ptr();
  for (std::size_t i = 0; i < a.size(); ++i) dst[i] = f(src[i]);
  return out;
}

void accumulate(Node& n, std::size_t input, const Tensor& g) {
  Node& in = *n.inputs[input];
  if (!in.requires_grad) return;
  Tensor& buf = in.grad_buffer();
  float* d = buf.ptr();
  const float* s = g.ptr();
  for (std::size_t i = 0; i < g.size(); ++i) d[i] += s[i];
}

float* grad_target(Node& n, std::size_t input) {
  Node& in = *n.inputs[input];
  return in.requires_grad ? in.grad_buffer().ptr() : nullptr;
}

void require_chw(const Tensor& t, const char* what) {
  if (t.rank() != 3) throw DimensionError(std::string(what) + ": expected [C,H,W], got " +
                                          shape_str(t.shape()));
}

struct ConvGeometry {
  int channels, height, width, kernels, kh, kw, stride, padding, out_h, out_w;
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && padding == 0; }
};

ConvGeometry conv_geometry(const Tensor& input, const Tensor& weight, int stride, int padding) {
  require_chw(input, "conv2d input");
  if (weight.rank() != 4) throw DimensionError("conv2d weight must be [K,C,kh,kw]");
  if (stride < 1 || padding < 0) throw ParameterError("conv2d: invalid stride/padding");
  ConvGeometry g{};
  g.channels = input.dim(0);
  g.height = input.dim(1);
  g.width = input.dim(2);
  g.kernels = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.padding = padding;
  if (weight.dim(1) != g.channels)
    throw DimensionError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                         " channels, input has " + std::to_string(g.channels));
  if (g.height + 2 * padding < g.kh || g.width + 2 * padding < g.kw)
    throw DimensionError("conv2d: kernel larger than padded input");
  g.out_h = (g.height + 2 * padding - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kw) / stride + 1;
  return g;
}

void im2col(const ConvGeometry& g, const float* x, float* cols) {
  const int hw = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c)
    for (int i = 0; i < g.kh; ++i)
      for (int j = 0; j < g.kw; ++j) {
        float* row = cols + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * hw;
        const float* plane = x + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + i;
          float* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, 0.0f);
            continue;
          }
          const float* src = plane + static_cast<std::size_t>(ih) * g.width;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride - g.padding + j;
            dst[ow] = (iw < 0 || iw >= g.width) ? 0.0f : src[iw];
          }
        }
      }
}

void col2im_add(const ConvGeometry& g, const float* cols, float* dx) {
  const int hw = g.out_h * g.out_w;
  for (int c = 0; c < g.channels; ++c)
    for (int i = 0; i < g.kh; ++i)
      for (int j = 0; j < g.kw; ++j) {
        const float* row = cols + static_cast<std::size_t>((c * g.kh + i) * g.kw + j) * hw;
        float* plane = dx + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + i;
          if (ih < 0 || ih >= g.height) continue;
          float* dst = plane + static_cast<std::size_t>(ih) * g.width;
          const float* src = row + oh * g.out_w;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride - g.padding + j;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
}

Tensor conv_forward_impl(const ConvGeometry& g, const Tensor& input, const Tensor& weight,
                         const Tensor* bias, FloatStorage* cols_out) {
  const int ckk = g.channels * g.kh * g.kw;
  const int hw = g.out_h * g.out_w;
  Tensor out({g.kernels, g.out_h, g.out_w});
  CMapRM w(weight.ptr(), g.kernels, ckk);
  MapRM y(out.ptr(), g.kernels, hw);
  if (g.pointwise()) {
    y.noalias() = w * CMapRM(input.ptr(), ckk, hw);
  } else {
    FloatStorage cols(static_cast<std::size_t>(ckk) * hw);
    im2col(g, input.ptr(), cols.data());
    y.noalias() = w * CMapRM(cols.data(), ckk, hw);
    if (cols_out) *cols_out = std::move(cols);
  }
  if (bias) {
    if (bias->size() != static_cast<std::size_t>(g.kernels))
      throw DimensionError("conv2d: bias length mismatch");
    for (int k = 0; k < g.kernels; ++k) y.row(k).array() += (*bias)[k];
  }
  return out;
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    accumulate(n, 0, n.grad);
    accumulate(n, 1, n.grad);
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    accumulate(n, 0, n.grad);
    if (float* db = grad_target(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) db[i] -= n.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.inputs[0]->value;
    const Tensor& bv = n.inputs[1]->value;
    if (float* da = grad_target(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) da[i] += n.grad[i] * bv[i];
    if (float* db = grad_target(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) db[i] += n.grad[i] * av[i];
  });
}

Var div(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "div");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.inputs[0]->value;
    const Tensor& bv = n.inputs[1]->value;
    if (float* da = grad_target(n, 0))
      for (std::size_t i = 0; i < n.grad.size(); ++i) da[i] += n.grad[i] / bv[i];
    if (float* db = grad_target(n, 1))
      for (std::size_t i = 0; i < n.grad.size(); ++i) db[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
  });
}

Var add_scalar(const Var& a, float s) {
  Tensor out = map_unary(a.value(), [s](float v) { return v + s; });
  return make_result(std::move(out), {a}, [](Node& n) { accumulate(n, 0, n.grad); });
}

Var mul_scalar(const Var& a, float s) {
  Tensor out = map_unary(a.value(), [s](float v) { return v * s; });
  return make_result(std::move(out), {a}, [s](Node& n) {
    float* da = grad_target(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) da[i] += n.grad[i] * s;
  });
}

Var mul_const(const Var& a, const Tensor& c) {
  require_same_shape(a.value(), c, "mul_const");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c[i];
  return make_result(std::move(out), {a}, [c](Node& n) {
    float* da = grad_target(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) da[i] += n.grad[i] * c[i];
  });
}

Var square(const Var& a) {
  Tensor out = map_unary(a.value(), [](float v) { return v * v; });
  return make_result(std::move(out), {a}, [](Node& n) {
    const Tensor& av = n.inputs[0]->value;
    float* da = grad_target(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) da[i] += 2.0f * av[i] * n.grad[i];
  });
}

Var abs(const Var& a) {
  Tensor out = map_unary(a.value(), [](float v) { return std::abs(v); });
  return make_result(std::move(out), {a}, [](Node& n) {
    const Tensor& av = n.inputs[0]->value;
    float* da = grad_target(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const float s = av[i] > 0.0f ? 1.0f : (av[i] < 0.0f ? -1.0f : 0.0f);
      da[i] += s * n.grad[i];
    }
  });
}

Var exp(const Var& a) {
  Tensor out = map_unary(a.value(), [](float v) { return std::exp(v); });
  return make_result(std::move(out), {a}, [](Node& n) {
    float* da = grad_target(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) da[i] += n.value[i] * n.grad[i];
  });
}

Var tanh(const Var& a) {
  Tensor out = map_unary(a.value(), [](float v) { return std::tanh(v); });
  return make_result(std::move(out), {a}, [](Node& n) {
    float* da = grad_target(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const float y = n.value[i];
      da[i] += (1.0f - y * y) * n.grad[i];
    }
  });
}

Var sigmoid(const Var& a) {
  Tensor out = map_unary(a.value(), [](float v) { return 1.0f / (1.0f + std::exp(-v)); });
  return make_result(std::move(out), {a}, [](Node& n) {
    float* da = grad_target(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const float y = n.value[i];
      da[i] += y * (1.0f - y) * n.grad[i];
    }
  });
}

Var gelu(const Var& a) {
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  Tensor out = map_unary(a.value(), [](float v) { return 0.5f * v * (1.0f + std::erf(v * kInvSqrt2)); });
  return make_result(std::move(out), {a}, [](Node& n) {
    constexpr float kInvSqrt2Pi = 0.39894228040143268f;
    const Tensor& av = n.inputs[0]->value;
    float* da = grad_target(n, 0);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      const float x = av[i];
      const float cdf = 0.5f * (1.0f + std::erf(x * kInvSqrt2));
      const float pdf = kInvSqrt2Pi * std::exp(-0.5f * x * x);
      da[i] += (cdf + x * pdf) * n.grad[i];
    }
  });
}

Var stop_gradient(const Var& a) { return Var(a.value(), false); }

Var sum(const Var& a) {
  Tensor out({1}, static_cast<float>(a.value().sum()));
  return make_result(std::move(out), {a}, [](Node& n) {
    float* da = grad_target(n, 0);
    const float g = n.grad[0];
    const std::size_t len = n.inputs[0]->value.size();
    for (std::size_t i = 0; i < len; ++i) da[i] += g;
  });
}

Var mean(const Var& a) {
  const float count = static_cast<float>(a.value().size());
  Tensor out({1}, static_cast<float>(a.value().sum() / count));
  return make_result(std::move(out), {a}, [count](Node& n) {
    float* da = grad_target(n, 0);
    const float g = n.grad[0] / count;
    const std::size_t len = n.inputs[0]->value.size();
    for (std::size_t i = 0; i < len; ++i) da[i] += g;
  });
}

Tensor conv2d_forward(const Tensor& input, const Tensor& weight, const Tensor* bias, int stride,
                      int padding) {
  return conv_forward_impl(conv_geometry(input, weight, stride, padding), input, weight, bias,
                           nullptr);
}

Var conv2d(const Var& input, const Var& weight, const Var& bias, int stride, int padding) {
  const ConvGeometry g = conv_geometry(input.value(), weight.value(), stride, padding);
  const bool record = grad_enabled() && (input.requires_grad() || weight.requires_grad() ||
                                         (bias.defined() && bias.requires_grad()));
  FloatStorage cols;
  Tensor out = conv_forward_impl(g, input.value(), weight.value(),
                                 bias.defined() ? &bias.value() : nullptr, record ? &cols : nullptr);
  std::vector<Var> inputs{input, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_result(std::move(out), std::move(inputs),
                     [g, has_bias, cols = std::move(cols)](Node& n) {
    const int ckk = g.channels * g.kh * g.kw;
    const int hw = g.out_h * g.out_w;
    CMapRM dy(n.grad.ptr(), g.kernels, hw);
    const float* col_data = g.pointwise() ? n.inputs[0]->value.ptr() : cols.data();
    if (float* dw = grad_target(n, 1)) {
      MapRM(dw, g.kernels, ckk).noalias() += dy * CMapRM(col_data, ckk, hw).transpose();
    }
    if (has_bias) {
      if (float* db = grad_target(n, 2))
        for (int k = 0; k < g.kernels; ++k) db[k] += dy.row(k).sum();
    }
    if (float* dx = grad_target(n, 0)) {
      CMapRM w(n.inputs[1]->value.ptr(), g.kernels, ckk);
      if (g.pointwise()) {
        MapRM(dx, ckk, hw).noalias() += w.transpose() * dy;
      } else {
        RowMajor dcols = w.transpose() * dy;
        col2im_add(g, dcols.data(), dx);
      }
    }
  });
}

Tensor pixel_shuffle_forward(const Tensor& input, int r) {
  require_chw(input, "pixel_shuffle");
  if (r < 1) throw ParameterError("pixel_shuffle: factor must be >= 1");
  const int cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (cin % (r * r) != 0)
    throw DimensionError("pixel_shuffle: channels " + std::to_string(cin) +
                         " not divisible by r^2 = " + std::to_string(r * r));
  const int c = cin / (r * r);
  Tensor out({c, h * r, w * r});
  for (int oc = 0; oc < c; ++oc)
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < r; ++j) {
        const int ic = oc * r * r + i * r + j;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) out.at(oc, y * r + i, x * r + j) = input.at(ic, y, x);
      }
  return out;
}

Tensor pixel_unshuffle_forward(const Tensor& input, int r) {
  require_chw(input, "pixel_unshuffle");
  if (r < 1) throw ParameterError("pixel_unshuffle: factor must be >= 1");
  const int c = input.dim(0), hr = input.dim(1), wr = input.dim(2);
  if (hr % r != 0 || wr % r != 0)
    throw DimensionError("pixel_unshuffle: spatial dims not divisible by factor");
  const int h = hr / r, w = wr / r;
  Tensor out({c * r * r, h, w});
  for (int oc = 0; oc < c; ++oc)
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < r; ++j) {
        const int ic = oc * r * r + i * r + j;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) out.at(ic, y, x) = input.at(oc, y * r + i, x * r + j);
      }
  return out;
}

Var pixel_shuffle(const Var& input, int r) {
  return make_result(pixel_shuffle_forward(input.value(), r), {input}, [r](Node& n) {
    accumulate(n, 0, pixel_unshuffle_forward(n.grad, r));
  });
}

Var pixel_unshuffle(const Var& input, int r) {
  return make_result(pixel_unshuffle_forward(input.value(), r), {input}, [r](Node& n) {
    accumulate(n, 0, pixel_shuffle_forward(n.grad, r));
  });
}

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_channels: no inputs");
  const Tensor& first = parts.front().value();
  require_chw(first, "concat_channels");
  int channels = 0;
  for (const Var& p : parts) {
    require_chw(p.value(), "concat_channels");
    if (p.dim(1) != first.dim(1) || p.dim(2) != first.dim(2))
      throw DimensionError("concat_channels: spatial mismatch " + shape_str(p.shape()) + " vs " +
                           shape_str(first.shape()));
    channels += p.dim(0);
  }
  Tensor out({channels, first.dim(1), first.dim(2)});
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().ptr(), p.value().ptr() + p.value().size(), out.ptr() + offset);
    offset += p.value().size();
  }
  return make_result(std::move(out), parts, [](Node& n) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const std::size_t len = n.inputs[k]->value.size();
      if (float* d = grad_target(n, k))
        for (std::size_t i = 0; i < len; ++i) d[i] += n.grad[offset + i];
      offset += len;
    }
  });
}

Var slice_channels(const Var& input, int begin, int count) {
  require_chw(input.value(), "slice_channels");
  if (begin < 0 || count <= 0 || begin + count > input.dim(0))
    throw DimensionError("slice_channels: range out of bounds");
  const std::size_t plane = static_cast<std::size_t>(input.dim(1)) * input.dim(2);
  Tensor out({count, input.dim(1), input.dim(2)});
  const float* src = input.value().ptr() + begin * plane;
  std::copy(src, src + count * plane, out.ptr());
  return make_result(std::move(out), {input}, [begin, plane](Node& n) {
    float* d = grad_target(n, 0) + begin * plane;
    for (std::size_t i = 0; i < n.grad.size(); ++i) d[i] += n.grad[i];
  });
}

Var layer_norm_channels(const Var& input, const Var& gamma, const Var& beta, float eps) {
  require_chw(input.value(), "layer_norm_channels");
  const int c = input.dim(0);
  const int hw = input.dim(1) * input.dim(2);
  if (gamma.value().size() != static_cast<std::size_t>(c) ||
      beta.value().size() != static_cast<std::size_t>(c))
    throw DimensionError("layer_norm_channels: affine length mismatch");
  const float* x = input.value().ptr();
  Tensor normed(input.shape());
  std::vector<float> inv_std(hw);
  for (int p = 0; p < hw; ++p) {
    float mu = 0.0f;
    for (int k = 0; k < c; ++k) mu += x[k * hw + p];
    mu /= c;
    float var = 0.0f;
    for (int k = 0; k < c; ++k) {
      const float d = x[k * hw + p] - mu;
      var += d * d;
    }
    var /= c;
    inv_std[p] = 1.0f / std::sqrt(var + eps);
    for (int k = 0; k < c; ++k) normed[k * hw + p] = (x[k * hw + p] - mu) * inv_std[p];
  }
  Tensor out(input.shape());
  for (int k = 0; k < c; ++k)
    for (int p = 0; p < hw; ++p)
      out[k * hw + p] = normed[k * hw + p] * gamma.value()[k] + beta.value()[k];
  return make_result(std::move(out), {input, gamma, beta},
                     [c, hw, normed = std::move(normed), inv_std = std::move(inv_std)](Node& n) {
    const float* dy = n.grad.ptr();
    const float* g = n.inputs[1]->value.ptr();
    if (float* dg = grad_target(n, 1))
      for (int k = 0; k < c; ++k)
        for (int p = 0; p < hw; ++p) dg[k] += dy[k * hw + p] * normed[k * hw + p];
    if (float* db = grad_target(n, 2))
      for (int k = 0; k < c; ++k)
        for (int p = 0; p < hw; ++p) db[k] += dy[k * hw + p];
    if (float* dx = grad_target(n, 0)) {
      for (int p = 0; p < hw; ++p) {
        float mean_d = 0.0f, mean_dn = 0.0f;
        for (int k = 0; k < c; ++k) {
          const float d = dy[k * hw + p] * g[k];
          mean_d += d;
          mean_dn += d * normed[k * hw + p];
        }
        mean_d /= c;
        mean_dn /= c;
        for (int k = 0; k < c; ++k) {
          const float d = dy[k * hw + p] * g[k];
          dx[k * hw + p] += inv_std[p] * (d - mean_d - normed[k * hw + p] * mean_dn);
        }
      }
    }
  });
}

Var separable_filter_valid(const Var& input, std::span<const float> kernel) {
  require_chw(input.value(), "separable_filter_valid");
  const int k = static_cast<int>(kernel.size());
  const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
  if (k < 1 || k > h || k > w) throw DimensionError("separable_filter_valid: kernel exceeds image");
  const int oh = h - k + 1, ow = w - k + 1;
  std::vector<float> taps(kernel.begin(), kernel.end());
  const float* x = input.value().ptr();
  Tensor tmp({c, oh, w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < oh; ++i) {
      float* dst = tmp.ptr() + (static_cast<std::size_t>(ch) * oh + i) * w;
      for (int t = 0; t < k; ++t) {
        const float* src = x + (static_cast<std::size_t>(ch) * h + i + t) * w;
        const float kt = taps[t];
        for (int j = 0; j < w; ++j) dst[j] += kt * src[j];
      }
    }
  Tensor out({c, oh, ow});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < oh; ++i) {
      const float* src = tmp.ptr() + (static_cast<std::size_t>(ch) * oh + i) * w;
      float* dst = out.ptr() + (static_cast<std::size_t>(ch) * oh + i) * ow;
      for (int j = 0; j < ow; ++j) {
        float s = 0.0f;
        for (int t = 0; t < k; ++t) s += taps[t] * src[j + t];
        dst[j] = s;
      }
    }
  return make_result(std::move(out), {input}, [c, h, w, k, oh, ow, taps](Node& n) {
    float* dx = grad_target(n, 0);
    std::vector<float> dtmp(static_cast<std::size_t>(c) * oh * w, 0.0f);
    const float* dy = n.grad.ptr();
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < oh; ++i) {
        const float* g = dy + (static_cast<std::size_t>(ch) * oh + i) * ow;
        float* d = dtmp.data() + (static_cast<std::size_t>(ch) * oh + i) * w;
        for (int j = 0; j < ow; ++j)
          for (int t = 0; t < k; ++t) d[j + t] += taps[t] * g[j];
      }
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < oh; ++i) {
        const float* g = dtmp.data() + (static_cast<std::size_t>(ch) * oh + i) * w;
        for (int t = 0; t < k; ++t) {
          float* d = dx + (static_cast<std::size_t>(ch) * h + i + t) * w;
          const float kt = taps[t];
          for (int j = 0; j < w; ++j) d[j] += kt * g[j];
        }
      }
  });
}

}  // namespace vqnerv::ops
