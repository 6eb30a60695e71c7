#include <doctest.h>

#include <cmath>
#include <set>

#include "vqnerv/errors.hpp"
#include "vqnerv/gradcheck.hpp"
#include "vqnerv/losses.hpp"
#include "vqnerv/model.hpp"
#include "vqnerv/ops.hpp"

using namespace vqnerv;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.height = 16;
  c.width = 32;
  c.strides = {2, 2, 2, 2};
  c.encoder_width = 8;
  c.decoder_channels = 8;
  c.codebook.size = 16;
  c.codebook.dim = 4;
  return c;
}

Tensor random_frame(std::uint64_t seed, int h = 16, int w = 32) {
  Rng rng(seed);
  return rng.uniform_tensor({3, h, w}, 0.0f, 1.0f);
}

void randomize(Model& m, const std::string& name, float stddev, std::uint64_t seed) {
  Rng rng(seed);
  Var& p = m.params().get(name);
  p.mutable_value() = rng.normal_tensor(p.shape(), stddev);
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("configuration validation") {
    ModelConfig c = tiny_config();
    CHECK_NOTHROW(validate(c));
    c.width = 30;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = tiny_config();
    c.haar_levels = 4;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = tiny_config();
    c.strides.clear();
    CHECK_THROWS_AS(validate(c), ConfigError);
  }

  TEST_CASE("stride plan at 1280x640 and 1920x960") {
    for (const ModelConfig& c : {ModelConfig::preset_1280x640(), ModelConfig::preset_1920x960()}) {
      ModelPlan p = solve_plan(c);
      int prod = 1;
      for (int s : c.strides) prod *= s;
      CHECK(p.embedding_shape == Shape{c.embed_channels, c.height / prod, c.width / prod});
      CHECK(p.feature_height == c.height / c.strides[0]);
      CHECK(p.feature_width == c.width / c.strides[0]);
      CHECK(p.token_height == p.feature_height / 8);
      CHECK(p.token_width == p.feature_width / 8);
      CHECK(std::abs(static_cast<double>(p.decoder_params) - c.decoder_budget) <=
            0.05 * c.decoder_budget);
    }
    ModelPlan p = solve_plan(ModelConfig::preset_1280x640());
    CHECK(p.embedding_shape == Shape{16, 2, 4});
    CHECK(p.feature_height == 128);
    CHECK(p.feature_width == 256);
  }

  TEST_CASE("desk-scale budget is met and counted exactly") {
    for (double budget : {0.1e6, 0.3e6}) {
      ModelConfig c;
      c.decoder_budget = budget;
      Model m(c, 1);
      CHECK(m.decoder_parameter_count() == m.plan().decoder_params);
      CHECK(std::abs(static_cast<double>(m.decoder_parameter_count()) - budget) <= 0.05 * budget);
      CHECK(m.params().numel() == m.plan().total_params);
    }
  }

  TEST_CASE("decode side excludes the encoder and the projection into code space") {
    CHECK_FALSE(is_decode_side("encoder.stage0.down.weight"));
    CHECK_FALSE(is_decode_side("vq.proj_down.weight"));
    CHECK(is_decode_side("vq.proj_up.weight"));
    CHECK(is_decode_side("decoder.block0.conv.weight"));
    CHECK(is_decode_side("head.bias"));
  }

  TEST_CASE("zero frame through a zeroed output layer gives a zero embedding") {
    Model m(tiny_config(), 2);
    m.params().get("encoder.out.weight").mutable_value().fill(0.0f);
    m.params().get("encoder.out.bias").mutable_value().fill(0.0f);
    Model::Encoded e = m.encode_frame(Var(Tensor::zeros({3, 16, 32})));
    CHECK(e.embedding.shape() == m.plan().embedding_shape);
    for (float v : e.embedding.value().data()) CHECK(v == 0.0f);
  }

  TEST_CASE("zero embedding with zero biases gives zero f_d") {
    Model m(tiny_config(), 3);
    for (auto& [name, v] : m.params())
      if (name.rfind("decoder.", 0) == 0 && name.find(".bias") != std::string::npos)
        v.mutable_value().fill(0.0f);
    Model::Trunk t = m.decode_trunk(Var(Tensor::zeros(m.plan().embedding_shape)));
    CHECK(t.f_d.shape() == Shape{m.plan().trunk_channels, 8, 16});
    for (float v : t.f_d.value().data()) CHECK(v == 0.0f);
  }

  TEST_CASE("encoder and trunk are deterministic") {
    Model a(tiny_config(), 4), b(tiny_config(), 4);
    const Tensor f = random_frame(1);
    Tensor ea = a.encode_frame(Var(f)).embedding.value();
    CHECK(ea.storage() == b.encode_frame(Var(f)).embedding.value().storage());
    CHECK(ea.storage() == a.encode_frame(Var(f)).embedding.value().storage());
    CHECK(a.decode_trunk(Var(ea)).f_d.value().storage() ==
          b.decode_trunk(Var(ea)).f_d.value().storage());
  }

  TEST_CASE("zero residual quantizes to the reserved zero code") {
    Model m(tiny_config(), 5);
    Rng rng(1);
    Var f(rng.normal_tensor({m.plan().trunk_channels, 8, 16}));
    Model::BlockOutput b = m.vq_block(f, f, f, QuantMode::kCodebook);
    CHECK(b.tokens.height == 1);
    CHECK(b.tokens.width == 2);
    for (int t : b.tokens.indices) CHECK(t == 0);
  }

  TEST_CASE("token grid follows the Haar depth") {
    ModelConfig c;
    Model m(c, 6);
    CHECK(m.plan().token_height == c.height / c.strides[0] / 8);
    CHECK(m.plan().token_width == c.width / c.strides[0] / 8);
    FrameForward f = m.forward_frame(Var(random_frame(2, 64, 128)), {}, QuantMode::kCodebook);
    CHECK(f.tokens.height == 2);
    CHECK(f.tokens.width == 4);
    CHECK(f.tokens.size() == 8);
    CHECK(f.vq_features.shape() == Shape{8, c.codebook.dim});
  }

  TEST_CASE("block transform round trip without quantization") {
    ModelConfig c = tiny_config();
    Model m(c, 7);
    const int half = m.plan().haar_channels / 2;
    ParameterSet params;
    Rng rng(3);
    CouplingSettings s{half, half, c.coupling_hidden, c.coupling_kernel, c.scale_clamp};
    CouplingBlock block(params, "rt", s, rng);
    block.randomize(rng, 0.5f);
    Tensor x = rng.normal_tensor({m.plan().block_channels, 8, 16});
    Var y = haar_forward(Var(x), c.haar_levels);
    auto [v1, v2] = block.forward(ops::slice_channels(y, 0, half), ops::slice_channels(y, half, half));
    auto [f_hat, x_hat] = block.inverse(v1, v2);
    Tensor back = haar_inverse(ops::concat_channels({x_hat, f_hat}), c.haar_levels).value();
    CHECK(back.max_abs_diff(x) < 1e-5f);
  }

  TEST_CASE("reconstruction lies in the unit range") {
    Model m(tiny_config(), 8);
    for (auto& [name, v] : m.params()) {
      Rng rng(static_cast<std::uint64_t>(name.size()));
      v.mutable_value() = rng.normal_tensor(v.shape(), 2.0f);
    }
    FrameForward f = m.forward_frame(Var(random_frame(3)), {}, QuantMode::kCodebook);
    CHECK(f.reconstruction.shape() == Shape{3, 16, 32});
    for (float v : f.reconstruction.value().data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }

  TEST_CASE("zero O_t is the plain decoder path") {
    Model m(tiny_config(), 9);
    randomize(m, "vq.adapter.weight", 0.5f, 1);
    Model::Trunk t = m.decode_trunk(m.encode_frame(Var(random_frame(4))).embedding);
    Tensor zero_o = Tensor::zeros({m.plan().block_channels, 8, 16});
    CHECK(m.reconstruct_frame(t.trunk_out, Var(zero_o)).value().storage() ==
          m.reconstruct_frame(t.trunk_out, Var()).value().storage());
  }

  TEST_CASE("baseline graph is the VQ graph minus the block") {
    ModelConfig c = tiny_config();
    Model vq(c, 10);
    c.use_vq = false;
    Model base(c, 10);
    std::set<std::string> base_names, vq_names;
    for (const auto& [name, v] : base.params()) {
      base_names.insert(name);
      CHECK(v.shape() == vq.params().get(name).shape());
    }
    for (const auto& [name, v] : vq.params())
      if (name.rfind("vq.", 0) != 0) vq_names.insert(name);
    CHECK(base_names == vq_names);
    FrameForward f = base.forward_frame(Var(random_frame(5)), {}, QuantMode::kCodebook);
    CHECK_FALSE(f.o_t.defined());
    CHECK_FALSE(f.vq_loss.defined());
    CHECK_THROWS_AS(base.fuse_tokens(TokenGrid{1, 2, {0, 0}}), StateError);
  }

  TEST_CASE("fresh model starts from the baseline output") {
    ModelConfig c = tiny_config();
    Model vq(c, 11);
    c.use_vq = false;
    Model base(c, 11);
    for (auto& [name, v] : base.params()) v.mutable_value() = vq.params().get(name).value();
    const Tensor frame = random_frame(6);
    CHECK(vq.forward_frame(Var(frame), {}, QuantMode::kCodebook).reconstruction.value().storage() ==
          base.forward_frame(Var(frame), {}, QuantMode::kCodebook).reconstruction.value().storage());
  }

  TEST_CASE("single-frame video uses the frame as its own predecessor") {
    Model m(tiny_config(), 12);
    randomize(m, "vq.adapter.weight", 0.5f, 2);
    const Tensor frame = random_frame(7);
    std::vector<FrameForward> v = m.forward_video({frame}, QuantMode::kPassThrough);
    REQUIRE(v.size() == 1);
    FrameForward f = m.forward_frame(Var(frame), v[0].f_d.value(), QuantMode::kPassThrough);
    CHECK(v[0].reconstruction.value().storage() == f.reconstruction.value().storage());
    CHECK_THROWS_AS(m.forward_video({}, QuantMode::kCodebook), ParameterError);
  }

  TEST_CASE("frame t depends on frame t-1") {
    Model m(tiny_config(), 13);
    randomize(m, "vq.adapter.weight", 0.5f, 3);
    const Tensor f0 = random_frame(8), f1 = random_frame(9);
    Tensor a = m.forward_video({f0, f1}, QuantMode::kPassThrough)[1].reconstruction.value();
    Tensor b = m.forward_video({random_frame(10), f1}, QuantMode::kPassThrough)[1].reconstruction.value();
    CHECK(a.max_abs_diff(b) > 0.0f);
  }

  TEST_CASE("sequential decode matches forward_video bit-exactly") {
    Model m(tiny_config(), 14);
    randomize(m, "vq.adapter.weight", 0.5f, 4);
    std::vector<Tensor> frames{random_frame(11), random_frame(12), random_frame(13)};
    std::vector<FrameForward> all = m.forward_video(frames, QuantMode::kCodebook);
    Tensor cached;
    for (std::size_t i = 0; i < frames.size(); ++i) {
      FrameForward f = m.forward_frame(Var(frames[i]), cached, QuantMode::kCodebook);
      CHECK(f.reconstruction.value().storage() == all[i].reconstruction.value().storage());
      CHECK(f.tokens == all[i].tokens);
      CHECK(m.decode_frame(f.embedding.value(), f.tokens).storage() ==
            f.reconstruction.value().storage());
      cached = f.f_d.value();
    }
  }

  TEST_CASE("decode_frame rejects a misshapen token grid") {
    Model m(tiny_config(), 15);
    CHECK_THROWS_AS(m.decode_frame(Tensor::zeros(m.plan().embedding_shape), TokenGrid{2, 2, {0, 0, 0, 0}}),
                    DimensionError);
  }

  TEST_CASE("end-to-end gradient check without quantization") {
    ModelConfig c = tiny_config();
    c.detach_block_inputs = false;
    Model m(c, 16);
    randomize(m, "vq.adapter.weight", 0.3f, 5);
    const Tensor f0 = random_frame(14), f1 = random_frame(15);
    Tensor prev;
    {
      NoGradGuard guard;
      prev = m.decode_trunk(m.encode_frame(Var(f0)).embedding).f_d.value();
    }
    GradCheckResult r = grad_check(
        [&] {
          FrameForward f = m.forward_frame(Var(f1), prev, QuantMode::kPassThrough);
          return reconstruction_loss(f.reconstruction, f1, 0.7f);
        },
        m.params(), 1e-3f, 64, 3);
    INFO("worst parameter " << r.worst_parameter << ", error " << r.max_error);
    CHECK(r.max_error < 1e-2);
  }
}
