#include "vqnerv/model.hpp"

#include <cmath>
#include <functional>
#include <numeric>

#include "vqnerv/errors.hpp"
#include "vqnerv/ops.hpp"

namespace vqnerv {

ModelConfig ModelConfig::preset_1280x640() {
  ModelConfig c;
  c.height = 640;
  c.width = 1280;
  c.strides = {5, 4, 4, 2, 2};
  c.encoder_width = 64;
  c.decoder_budget = 3.0e6;
  return c;
}

ModelConfig ModelConfig::preset_1920x960() {
  ModelConfig c = preset_1280x640();
  c.height = 960;
  c.width = 1920;
  c.strides = {5, 4, 4, 3, 2};
  return c;
}

void validate(const ModelConfig& c) {
  if (c.height <= 0 || c.width <= 0) throw ConfigError("resolution must be positive");
  if (c.strides.size() < 2) throw ConfigError("need at least two strides");
  for (int s : c.strides)
    if (s < 1) throw ConfigError("strides must be >= 1");
  const int total = std::accumulate(c.strides.begin(), c.strides.end(), 1, std::multiplies<>());
  if (c.height % total || c.width % total)
    throw ConfigError("stride product " + std::to_string(total) + " does not divide " +
                      std::to_string(c.height) + "x" + std::to_string(c.width));
  if (c.embed_channels < 1 || c.encoder_width < 1 || c.min_channels < 1)
    throw ConfigError("channel counts must be positive");
  if (c.reduction <= 0.0f) throw ConfigError("reduction must be positive");
  if (c.decoder_channels < 0) throw ConfigError("decoder_channels must be >= 0");
  if (c.decoder_channels == 0 && c.decoder_budget <= 0.0)
    throw ConfigError("decoder_budget must be positive");
  if (c.use_vq) {
    if (c.haar_levels < 1) throw ConfigError("haar_levels must be >= 1");
    const int step = 1 << c.haar_levels;
    const int h0 = c.height / c.strides[0], w0 = c.width / c.strides[0];
    if (h0 % step || w0 % step)
      throw ConfigError("shallow feature " + std::to_string(h0) + "x" + std::to_string(w0) +
                        " not divisible by " + std::to_string(step) + " for the Haar cascade");
    if (c.codebook.size < 2) throw ConfigError("codebook size must be >= 2");
    if (c.codebook.dim < 1) throw ConfigError("codebook dim must be >= 1");
    if (c.coupling_hidden < 1 || c.coupling_kernel < 1 || c.coupling_kernel % 2 == 0)
      throw ConfigError("coupling hidden must be >= 1 and kernel odd");
    if (c.codebook.decay <= 0.0f || c.codebook.decay >= 1.0f)
      throw ConfigError("codebook decay must be in (0,1)");
    if (c.codebook.beta < 0.0f) throw ConfigError("beta must be >= 0");
  }
}

bool is_decode_side(const std::string& name) {
  return name.rfind("encoder.", 0) != 0 && name.rfind("vq.proj_down.", 0) != 0;
}

ModelPlan make_plan(const ModelConfig& c, int first_width) {
  validate(c);
  if (first_width < 1) throw ConfigError("first decoder width must be >= 1");
  ModelPlan p;
  const int n = static_cast<int>(c.strides.size());
  const int total = std::accumulate(c.strides.begin(), c.strides.end(), 1, std::multiplies<>());
  p.embedding_shape = {c.embed_channels, c.height / total, c.width / total};
  p.feature_height = c.height / c.strides[0];
  p.feature_width = c.width / c.strides[0];
  for (int i = 0; i < n; ++i) {
    const int w = static_cast<int>(std::lround(first_width / std::pow(c.reduction, i)));
    p.decoder_widths.push_back(std::max(c.min_channels, w));
  }
  p.trunk_channels = p.decoder_widths[n - 2];
  p.block_channels = 2 * p.trunk_channels;

  auto add = [&p](std::string name, Shape shape, bool decode) {
    p.params.push_back({std::move(name), std::move(shape), decode});
  };

  // Encoder: stage i downsamples by strides[i]; stage 0 matches the trunk width.
  int in = 3;
  for (int i = 0; i < n; ++i) {
    const int out = i == 0 ? p.trunk_channels : c.encoder_width;
    const int s = c.strides[i];
    const std::string pre = "encoder.stage" + std::to_string(i);
    add(pre + ".down.weight", {out, in, s, s}, false);
    add(pre + ".down.bias", {out}, false);
    add(pre + ".norm.weight", {out}, false);
    add(pre + ".norm.bias", {out}, false);
    add(pre + ".block.norm.weight", {out}, false);
    add(pre + ".block.norm.bias", {out}, false);
    add(pre + ".block.conv.weight", {out, out, 3, 3}, false);
    add(pre + ".block.conv.bias", {out}, false);
    add(pre + ".block.pw.weight", {out, out, 1, 1}, false);
    add(pre + ".block.pw.bias", {out}, false);
    in = out;
  }
  add("encoder.out.weight", {c.embed_channels, in, 1, 1}, false);
  add("encoder.out.bias", {c.embed_channels}, false);

  // Decoder trunk uses the strides in reverse, leaving strides[0] for Dec0.
  in = c.embed_channels;
  for (int i = 0; i < n; ++i) {
    const int s = c.strides[n - 1 - i];
    const int out = p.decoder_widths[i];
    const std::string pre = i == n - 1 ? std::string("dec0") : "decoder.block" + std::to_string(i);
    add(pre + ".conv.weight", {out * s * s, in, 3, 3}, true);
    add(pre + ".conv.bias", {out * s * s}, true);
    in = out;
  }
  add("head.weight", {3, in, 3, 3}, true);
  add("head.bias", {3}, true);

  if (c.use_vq) {
    const int step = 1 << c.haar_levels;
    p.token_height = p.feature_height / step;
    p.token_width = p.feature_width / step;
    p.haar_channels = p.block_channels * step * step;
    const int half = p.haar_channels / 2;
    const int d = c.codebook.dim;
    const int k = c.coupling_kernel, hdn = c.coupling_hidden;
    add("vq.proj_down.weight", {d, half, 1, 1}, false);
    add("vq.proj_up.weight", {half, d, 1, 1}, true);
    add("vq.agnostic", {half, p.token_height, p.token_width}, true);
    for (const char* sub : {"s1", "t1", "t2"}) {
      add(std::string("vq.coupling.") + sub + ".0.weight", {hdn, half, k, k}, true);
      add(std::string("vq.coupling.") + sub + ".1.weight", {half, hdn, k, k}, true);
    }
    const int c0 = p.block_channels;
    add("vq.gate.ux.weight", {c0, c0, 3, 3}, true);
    add("vq.gate.ux.bias", {c0}, true);
    add("vq.gate.uf.weight", {c0, c0 / 2, 3, 3}, true);
    add("vq.gate.uf.bias", {c0}, true);
    add("vq.gate.vx.weight", {c0, c0, 3, 3}, true);
    add("vq.gate.vx.bias", {c0}, true);
    add("vq.gate.vf.weight", {c0, c0 / 2, 3, 3}, true);
    add("vq.gate.vf.bias", {c0}, true);
    add("vq.adapter.weight", {p.trunk_channels, c0, 1, 1}, true);
  }

  for (const ParamSpec& s : p.params) {
    const std::size_t count = shape_numel(s.shape);
    p.total_params += count;
    if (s.decode_side) p.decoder_params += count;
  }
  return p;
}

ModelPlan solve_plan(const ModelConfig& c) {
  if (c.decoder_channels > 0) return make_plan(c, c.decoder_channels);
  ModelPlan best;
  double best_err = -1.0;
  for (int w = 1; w <= 4096; ++w) {
    ModelPlan p = make_plan(c, w);
    const double count = static_cast<double>(p.decoder_params);
    const double err = std::abs(count - c.decoder_budget);
    if (best_err < 0.0 || err < best_err) {
      best_err = err;
      best = std::move(p);
    }
    if (count > c.decoder_budget * 1.5) break;
  }
  if (best_err > 0.05 * c.decoder_budget)
    throw ConfigError("decoder budget " + std::to_string(c.decoder_budget) +
                      " unreachable within 5%; closest is " +
                      std::to_string(best.decoder_params));
  return best;
}

Var Model::Conv::operator()(const Var& x) const {
  return ops::conv2d(x, weight, bias, stride, padding);
}

Model::Conv Model::make_conv(const std::string& name, int in, int out, int k, int stride,
                             int padding, bool bias, bool zero) {
  Conv conv;
  conv.stride = stride;
  conv.padding = padding;
  const float std = std::sqrt(2.0f / static_cast<float>(in * k * k));
  conv.weight = params_.add(name + ".weight", zero ? Tensor::zeros({out, in, k, k})
                                                   : rng_.normal_tensor({out, in, k, k}, std));
  if (bias) conv.bias = params_.add(name + ".bias", Tensor::zeros({out}));
  return conv;
}

Model::Model(const ModelConfig& config, std::uint64_t seed)
    : config_(config), plan_(solve_plan(config)), rng_(seed) {
  const int n = static_cast<int>(config_.strides.size());
  int in = 3;
  for (int i = 0; i < n; ++i) {
    const int out = i == 0 ? plan_.trunk_channels : config_.encoder_width;
    const int s = config_.strides[i];
    const std::string pre = "encoder.stage" + std::to_string(i);
    EncoderStage st;
    st.down = make_conv(pre + ".down", in, out, s, s, 0, true, false);
    st.norm_gamma = params_.add(pre + ".norm.weight", Tensor::full({out}, 1.0f));
    st.norm_beta = params_.add(pre + ".norm.bias", Tensor::zeros({out}));
    st.block_gamma = params_.add(pre + ".block.norm.weight", Tensor::full({out}, 1.0f));
    st.block_beta = params_.add(pre + ".block.norm.bias", Tensor::zeros({out}));
    st.block_conv = make_conv(pre + ".block.conv", out, out, 3, 1, 1, true, false);
    st.block_pw = make_conv(pre + ".block.pw", out, out, 1, 1, 0, true, false);
    encoder_.push_back(std::move(st));
    in = out;
  }
  encoder_out_ = make_conv("encoder.out", in, config_.embed_channels, 1, 1, 0, true, false);

  in = config_.embed_channels;
  for (int i = 0; i < n; ++i) {
    const int s = config_.strides[n - 1 - i];
    const int out = plan_.decoder_widths[i];
    const std::string pre = i == n - 1 ? std::string("dec0") : "decoder.block" + std::to_string(i);
    decoder_.push_back(make_conv(pre + ".conv", in, out * s * s, 3, 1, 1, true, false));
    in = out;
  }
  head_ = make_conv("head", in, 3, 3, 1, 1, true, false);

  if (config_.use_vq) {
    const int half = plan_.haar_channels / 2;
    const int d = config_.codebook.dim;
    const int c0 = plan_.block_channels;
    proj_down_ = make_conv("vq.proj_down", half, d, 1, 1, 0, false, false);
    proj_up_ = make_conv("vq.proj_up", d, half, 1, 1, 0, false, false);
    agnostic_ = params_.add("vq.agnostic",
                            Tensor::zeros({half, plan_.token_height, plan_.token_width}));
    CouplingSettings cs;
    cs.split_a = half;
    cs.split_b = half;
    cs.hidden = config_.coupling_hidden;
    cs.kernel = config_.coupling_kernel;
    cs.scale_clamp = config_.scale_clamp;
    coupling_ = CouplingBlock(params_, "vq.coupling", cs, rng_);
    gate_ux_ = make_conv("vq.gate.ux", c0, c0, 3, 1, 1, true, false);
    gate_uf_ = make_conv("vq.gate.uf", c0 / 2, c0, 3, 1, 1, true, false);
    gate_vx_ = make_conv("vq.gate.vx", c0, c0, 3, 1, 1, true, false);
    gate_vf_ = make_conv("vq.gate.vf", c0 / 2, c0, 3, 1, 1, true, false);
    // Zero adapter: a fresh model decodes exactly like the plain decoder.
    adapter_ = make_conv("vq.adapter", c0, plan_.trunk_channels, 1, 1, 0, false, true);
    CodebookSettings cb = config_.codebook;
    codebook_ = Codebook(cb, rng_);
  }

  if (params_.size() != plan_.params.size())
    throw ContractError("model parameters diverge from plan");
  std::size_t i = 0;
  for (const auto& [name, var] : params_) {
    const ParamSpec& spec = plan_.params[i++];
    if (spec.name != name || spec.shape != var.shape())
      throw ContractError("model parameter " + name + " diverges from plan entry " + spec.name);
  }
}

Model::Encoded Model::encode_frame(const Var& frame) const {
  if (frame.value().rank() != 3 || frame.dim(0) != 3 || frame.dim(1) != config_.height ||
      frame.dim(2) != config_.width)
    throw DimensionError("encode_frame: expected [3," + std::to_string(config_.height) + "," +
                         std::to_string(config_.width) + "], got " + shape_str(frame.shape()));
  Encoded e;
  Var x = frame;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const EncoderStage& st = encoder_[i];
    x = ops::layer_norm_channels(st.down(x), st.norm_gamma, st.norm_beta);
    Var h = ops::layer_norm_channels(x, st.block_gamma, st.block_beta);
    x = ops::add(x, st.block_pw(ops::gelu(st.block_conv(h))));
    if (i == 0) e.f_e = x;
  }
  e.embedding = encoder_out_(x);
  return e;
}

Model::Trunk Model::decode_trunk(const Var& embedding) const {
  if (embedding.shape() != plan_.embedding_shape)
    throw DimensionError("decode_trunk: expected embedding " + shape_str(plan_.embedding_shape) +
                         ", got " + shape_str(embedding.shape()));
  const int n = static_cast<int>(config_.strides.size());
  Var x = embedding;
  for (int i = 0; i < n - 1; ++i)
    x = ops::gelu(ops::pixel_shuffle(decoder_[i](x), config_.strides[n - 1 - i]));
  return {x, x};
}

Var Model::fuse(const Var& z) const {
  const int levels = config_.haar_levels;
  Var v2 = proj_up_(z);
  auto [f_c, x_c] = coupling_.inverse(agnostic_, v2);
  Var x_hat = haar_inverse(ops::concat_channels({x_c, f_c}), levels);
  Var f_hat = haar_inverse(f_c, levels);
  Var u = ops::tanh(ops::add(gate_ux_(x_hat), gate_uf_(f_hat)));
  Var v = ops::sigmoid(ops::add(gate_vx_(x_hat), gate_vf_(f_hat)));
  Var keep = ops::add_scalar(ops::mul_scalar(v, -1.0f), 1.0f);
  return ops::add(ops::mul(u, v), ops::mul(keep, x_hat));
}

Var Model::fuse_tokens(const TokenGrid& tokens) const {
  if (!config_.use_vq) throw StateError("fuse_tokens: model has no VQ path");
  if (tokens.height != plan_.token_height || tokens.width != plan_.token_width)
    throw DimensionError("fuse_tokens: token grid " + std::to_string(tokens.height) + "x" +
                         std::to_string(tokens.width) + " does not match " +
                         std::to_string(plan_.token_height) + "x" +
                         std::to_string(plan_.token_width));
  return fuse(Var(lookup_codes(codebook_.state(), tokens)));
}

Model::BlockOutput Model::vq_block(const Var& f_e, const Var& f_d_t, const Var& f_d_tm1,
                                   QuantMode mode) {
  if (!config_.use_vq) throw StateError("vq_block: model has no VQ path");
  if (f_e.shape() != f_d_t.shape() || f_e.shape() != f_d_tm1.shape())
    throw DimensionError("vq_block: misaligned features " + shape_str(f_e.shape()) + ", " +
                         shape_str(f_d_t.shape()) + ", " + shape_str(f_d_tm1.shape()));
  const int half = plan_.haar_channels / 2;
  // Detached decoder features keep the straight-through path out of the trunk.
  auto dec = [this](const Var& f) {
    return config_.detach_block_inputs ? ops::stop_gradient(f) : f;
  };
  Var x = ops::concat_channels({ops::sub(f_e, dec(f_d_t)), ops::sub(f_e, dec(f_d_tm1))});
  Var y = haar_forward(x, config_.haar_levels);
  auto [v1, v2] = coupling_.forward(ops::slice_channels(y, 0, half),
                                    ops::slice_channels(y, half, half));
  (void)v1;  // the content-agnostic learned tensor stands in for v1 at decode time
  Var z = proj_down_(v2);

  BlockOutput out;
  out.features = grid_to_rows(z.value());
  Var zq;
  if (mode == QuantMode::kPassThrough) {
    zq = z;
    out.tokens.height = z.dim(1);
    out.tokens.width = z.dim(2);
    out.tokens.indices.assign(static_cast<std::size_t>(z.dim(1)) * z.dim(2), 0);
    for (std::size_t r = 0; r < out.tokens.indices.size(); ++r)
      out.tokens.indices[r] =
          nearest_code(codebook_.state(), std::span<const float>(out.features.ptr() + r * z.dim(0),
                                                                 z.dim(0)));
  } else {
    QuantizeResult q = codebook_.quantize(z.value());
    zq = straight_through(z, q.z_q);
    out.vq_loss = vq_loss(z, q.z_q, config_.codebook.beta);
    out.tokens = std::move(q.tokens);
  }
  out.o_t = fuse(zq);
  return out;
}

Var Model::reconstruct_frame(const Var& trunk_out, const Var& o_t) const {
  Var x = trunk_out;
  if (o_t.defined()) x = ops::add(x, adapter_(o_t));
  Var h = ops::gelu(ops::pixel_shuffle(decoder_.back()(x), config_.strides[0]));
  Var out = ops::tanh(head_(h));
  return ops::mul_scalar(ops::add_scalar(out, 1.0f), 0.5f);
}

FrameForward Model::forward_frame(const Var& frame, const Tensor& f_d_tm1, QuantMode mode) {
  FrameForward r;
  Encoded e = encode_frame(frame);
  Trunk t = decode_trunk(e.embedding);
  r.embedding = e.embedding;
  r.f_e = e.f_e;
  r.f_d = t.f_d;
  if (config_.use_vq) {
    Var prev = f_d_tm1.empty() ? t.f_d : Var(f_d_tm1);
    BlockOutput b = vq_block(e.f_e, t.f_d, prev, mode);
    r.o_t = b.o_t;
    r.vq_loss = b.vq_loss;
    r.tokens = std::move(b.tokens);
    r.vq_features = std::move(b.features);
  }
  r.reconstruction = reconstruct_frame(t.trunk_out, r.o_t);
  return r;
}

std::vector<FrameForward> Model::forward_video(const std::vector<Tensor>& frames, QuantMode mode) {
  if (frames.empty()) throw ParameterError("forward_video: no frames");
  std::vector<FrameForward> out;
  out.reserve(frames.size());
  Tensor cached;
  for (const Tensor& frame : frames) {
    out.push_back(forward_frame(Var(frame), cached, mode));
    cached = out.back().f_d.value();
  }
  return out;
}

Tensor Model::decode_frame(const Tensor& embedding, const TokenGrid& tokens) const {
  NoGradGuard guard;
  Trunk t = decode_trunk(Var(embedding));
  Var o_t = config_.use_vq ? fuse_tokens(tokens) : Var();
  return reconstruct_frame(t.trunk_out, o_t).value();
}

std::size_t Model::decoder_parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, var] : params_)
    if (is_decode_side(name)) n += var.value().size();
  return n;
}

}  // namespace vqnerv
