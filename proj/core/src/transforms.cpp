#include "vqnerv/transforms.hpp"

#include <cmath>

#include "vqnerv/errors.hpp"
#include "vqnerv/ops.hpp"

namespace vqnerv {

Tensor haar_forward(const Tensor& x) {
  require_rank(x, 3, "haar_forward");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 || w % 2)
    throw DimensionError("haar_forward: odd spatial size " + shape_str(x.shape()));
  const int oh = h / 2, ow = w / 2;
  Tensor y({4 * c, oh, ow});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < oh; ++i)
      for (int j = 0; j < ow; ++j) {
        const float a = x.at(ch, 2 * i, 2 * j), b = x.at(ch, 2 * i, 2 * j + 1);
        const float cc = x.at(ch, 2 * i + 1, 2 * j), d = x.at(ch, 2 * i + 1, 2 * j + 1);
        y.at(ch, i, j) = 0.5f * (a + b + cc + d);
        y.at(c + ch, i, j) = 0.5f * (a - b + cc - d);
        y.at(2 * c + ch, i, j) = 0.5f * (a + b - cc - d);
        y.at(3 * c + ch, i, j) = 0.5f * (a - b - cc + d);
      }
  return y;
}

Tensor haar_inverse(const Tensor& y) {
  require_rank(y, 3, "haar_inverse");
  if (y.dim(0) % 4)
    throw DimensionError("haar_inverse: channels not divisible by 4 in " + shape_str(y.shape()));
  const int c = y.dim(0) / 4, h = y.dim(1), w = y.dim(2);
  Tensor x({c, 2 * h, 2 * w});
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const float ll = y.at(ch, i, j), lh = y.at(c + ch, i, j);
        const float hl = y.at(2 * c + ch, i, j), hh = y.at(3 * c + ch, i, j);
        x.at(ch, 2 * i, 2 * j) = 0.5f * (ll + lh + hl + hh);
        x.at(ch, 2 * i, 2 * j + 1) = 0.5f * (ll - lh + hl - hh);
        x.at(ch, 2 * i + 1, 2 * j) = 0.5f * (ll + lh - hl - hh);
        x.at(ch, 2 * i + 1, 2 * j + 1) = 0.5f * (ll - lh - hl + hh);
      }
  return x;
}

Tensor haar_forward(const Tensor& x, int levels) {
  if (levels < 1) throw ParameterError("haar_forward: levels must be >= 1");
  Tensor out = haar_forward(x);
  for (int l = 1; l < levels; ++l) out = haar_forward(out);
  return out;
}

Tensor haar_inverse(const Tensor& y, int levels) {
  if (levels < 1) throw ParameterError("haar_inverse: levels must be >= 1");
  Tensor out = haar_inverse(y);
  for (int l = 1; l < levels; ++l) out = haar_inverse(out);
  return out;
}

Var haar_forward(const Var& x, int levels) {
  return make_result(haar_forward(x.value(), levels), {x}, [levels](Node& n) {
    Tensor g = haar_inverse(n.grad, levels);
    Tensor& dst = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

Var haar_inverse(const Var& y, int levels) {
  return make_result(haar_inverse(y.value(), levels), {y}, [levels](Node& n) {
    Tensor g = haar_forward(n.grad, levels);
    Tensor& dst = n.inputs[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  });
}

CouplingBlock::CouplingBlock(ParameterSet& params, const std::string& prefix,
                             CouplingSettings settings, Rng& rng)
    : settings_(settings) {
  if (settings_.split_a <= 0 || settings_.split_b <= 0 || settings_.hidden <= 0)
    throw ParameterError("CouplingBlock: channel counts must be positive");
  if (settings_.kernel < 1 || settings_.kernel % 2 == 0)
    throw ParameterError("CouplingBlock: kernel must be odd");
  s1_ = make_subnet(params, prefix + ".s1", settings_.split_a, settings_.split_b, rng);
  t1_ = make_subnet(params, prefix + ".t1", settings_.split_a, settings_.split_b, rng);
  t2_ = make_subnet(params, prefix + ".t2", settings_.split_b, settings_.split_a, rng);
}

CouplingBlock::Subnet CouplingBlock::make_subnet(ParameterSet& params, const std::string& name,
                                                 int in, int out, Rng& rng) {
  const int k = settings_.kernel;
  Tensor first = rng.normal_tensor({settings_.hidden, in, k, k},
                                   std::sqrt(2.0f / static_cast<float>(in * k * k)));
  Subnet net;
  net.first = params.add(name + ".0.weight", std::move(first));
  net.second = params.add(name + ".1.weight", Tensor::zeros({out, settings_.hidden, k, k}));
  return net;
}

Var CouplingBlock::run(const Subnet& net, const Var& input) const {
  const int pad = settings_.kernel / 2;
  Var h = ops::gelu(ops::conv2d(input, net.first, Var(), 1, pad));
  return ops::conv2d(h, net.second, Var(), 1, pad);
}

Var CouplingBlock::s1(const Var& v1) const {
  Var s = run(s1_, v1);
  const float clamp = settings_.scale_clamp;
  if (clamp > 0.0f) return ops::mul_scalar(ops::tanh(ops::mul_scalar(s, 1.0f / clamp)), clamp);
  for (float v : s.value().data())
    if (!(std::abs(v) <= 20.0f))
      throw NumericError("coupling: |s1| exceeds 20, exp would overflow");
  return s;
}

Var CouplingBlock::t1(const Var& v1) const { return run(t1_, v1); }
Var CouplingBlock::t2(const Var& f) const { return run(t2_, f); }

std::pair<Var, Var> CouplingBlock::forward(const Var& x, const Var& f) const {
  if (x.value().rank() != 3 || f.value().rank() != 3 || x.dim(0) != settings_.split_a ||
      f.dim(0) != settings_.split_b || x.dim(1) != f.dim(1) || x.dim(2) != f.dim(2))
    throw DimensionError("coupling_forward: expected x " + std::to_string(settings_.split_a) +
                         " / f " + std::to_string(settings_.split_b) + " channels, got " +
                         shape_str(x.shape()) + " / " + shape_str(f.shape()));
  Var v1 = ops::add(x, t2(f));
  Var v2 = ops::add(ops::mul(f, ops::exp(s1(v1))), t1(v1));
  return {v1, v2};
}

std::pair<Var, Var> CouplingBlock::inverse(const Var& v1, const Var& v2) const {
  if (v1.value().rank() != 3 || v2.value().rank() != 3 || v1.dim(0) != settings_.split_a ||
      v2.dim(0) != settings_.split_b || v1.dim(1) != v2.dim(1) || v1.dim(2) != v2.dim(2))
    throw DimensionError("coupling_inverse: shape mismatch " + shape_str(v1.shape()) + " / " +
                         shape_str(v2.shape()));
  Var f_hat = ops::mul(ops::sub(v2, t1(v1)), ops::exp(ops::mul_scalar(s1(v1), -1.0f)));
  Var x_hat = ops::sub(v1, t2(f_hat));
  return {f_hat, x_hat};
}

std::size_t CouplingBlock::parameter_count() const {
  std::size_t n = 0;
  for (const Subnet* s : {&s1_, &t1_, &t2_})
    n += s->first.value().size() + s->second.value().size();
  return n;
}

void CouplingBlock::randomize(Rng& rng, float scale) {
  for (Subnet* s : {&s1_, &t1_, &t2_})
    for (Var* v : {&s->first, &s->second}) {
      Tensor& w = v->mutable_value();
      const float fan_in = static_cast<float>(w.dim(1) * w.dim(2) * w.dim(3));
      const float std = scale * std::sqrt(2.0f / fan_in);
      for (float& x : w.data()) x = rng.normal(0.0f, std);
    }
}

}  // namespace vqnerv
