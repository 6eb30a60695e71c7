#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "vqnerv/autograd.hpp"
#include "vqnerv/errors.hpp"
#include "vqnerv/gradcheck.hpp"
#include "vqnerv/ops.hpp"
#include "vqnerv/optim.hpp"
#include "vqnerv/rng.hpp"

using namespace vqnerv;

namespace {

Tensor sorted_values(const Tensor& t) {
  std::vector<float> v(t.data().begin(), t.data().end());
  std::sort(v.begin(), v.end());
  return Tensor({static_cast<int>(v.size())}, v);
}

// Scalar loss sum(out * probe) so every output element reaches the gradient.
Var probe_loss(const Var& out, std::uint64_t seed) {
  Rng rng(seed);
  return ops::sum(ops::mul_const(out, rng.normal_tensor(out.shape())));
}

void check_op(const std::function<Var(ParameterSet&)>& build, ParameterSet& params,
              double tol = 1e-2) {
  GradCheckResult r =
      grad_check([&] { return probe_loss(build(params), 99); }, params, 1e-3f, 48, 11);
  INFO("worst parameter: " << r.worst_parameter);
  CHECK(r.max_error < tol);
}

}  // namespace

TEST_SUITE("numeric-backend") {
  TEST_CASE("conv2d identity kernel") {
    Var x(Tensor::full({1, 2, 2}, 1.0f));
    Var w(Tensor::full({1, 1, 1, 1}, 1.0f));
    Tensor y = ops::conv2d(x, w, Var(), 1, 0).value();
    CHECK(y.shape() == Shape{1, 2, 2});
    for (float v : y.data()) CHECK(v == 1.0f);
  }

  TEST_CASE("conv2d block means with stride 2") {
    Tensor x({1, 4, 4});
    for (int i = 0; i < 16; ++i) x[i] = static_cast<float>(i);
    Tensor y = ops::conv2d(Var(x), Var(Tensor::full({1, 1, 2, 2}, 0.25f)), Var(), 2, 0).value();
    REQUIRE(y.shape() == Shape{1, 2, 2});
    for (int bh = 0; bh < 2; ++bh)
      for (int bw = 0; bw < 2; ++bw) {
        double mean = 0.0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) mean += x.at(0, 2 * bh + dy, 2 * bw + dx) / 4.0;
        CHECK(y.at(0, bh, bw) == doctest::Approx(mean));
      }
  }

  TEST_CASE("conv2d zero weight gives zero output") {
    Rng rng(1);
    Tensor y = ops::conv2d(Var(rng.normal_tensor({3, 5, 6})), Var(Tensor::zeros({4, 3, 3, 3})),
                           Var(), 1, 1)
                   .value();
    CHECK(y.shape() == Shape{4, 5, 6});
    for (float v : y.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("conv2d is linear") {
    Rng rng(2);
    Tensor a = rng.normal_tensor({3, 7, 5}), b = rng.normal_tensor({3, 7, 5});
    Tensor w = rng.normal_tensor({2, 3, 3, 3});
    Tensor mix(a.shape());
    for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = 1.5f * a[i] - 0.75f * b[i];
    Tensor lhs = ops::conv2d_forward(mix, w, nullptr, 2, 1);
    Tensor ya = ops::conv2d_forward(a, w, nullptr, 2, 1), yb = ops::conv2d_forward(b, w, nullptr, 2, 1);
    for (std::size_t i = 0; i < lhs.size(); ++i)
      CHECK(std::abs(lhs[i] - (1.5f * ya[i] - 0.75f * yb[i])) < 1e-5f);
  }

  TEST_CASE("conv2d rejects channel mismatch") {
    CHECK_THROWS_AS(ops::conv2d(Var(Tensor({2, 4, 4})), Var(Tensor({1, 3, 1, 1})), Var(), 1, 0),
                    DimensionError);
  }

  TEST_CASE("pixel_shuffle defining layout") {
    Tensor x = Tensor::from({4, 1, 1}, {1, 2, 3, 4});
    Tensor y = ops::pixel_shuffle_forward(x, 2);
    REQUIRE(y.shape() == Shape{1, 2, 2});
    CHECK(y.at(0, 0, 0) == 1);
    CHECK(y.at(0, 0, 1) == 2);
    CHECK(y.at(0, 1, 0) == 3);
    CHECK(y.at(0, 1, 1) == 4);
  }

  TEST_CASE("pixel_shuffle r=1 is identity and values are only permuted") {
    Rng rng(3);
    Tensor x = rng.normal_tensor({8, 2, 3});
    CHECK(ops::pixel_shuffle_forward(x, 1).storage() == x.storage());
    Tensor y = ops::pixel_shuffle_forward(x, 2);
    CHECK(y.shape() == Shape{2, 4, 6});
    CHECK(sorted_values(y).storage() == sorted_values(x).storage());
  }

  TEST_CASE("pixel_unshuffle inverts pixel_shuffle bit-exactly") {
    Rng rng(4);
    for (int r : {1, 2, 3}) {
      Tensor x = rng.normal_tensor({2 * r * r, 3, 4});
      CHECK(ops::pixel_unshuffle_forward(ops::pixel_shuffle_forward(x, r), r).storage() == x.storage());
    }
    CHECK_THROWS_AS(ops::pixel_shuffle_forward(Tensor({3, 2, 2}), 2), DimensionError);
  }

  TEST_CASE("adam with zero gradients leaves parameters unchanged") {
    ParameterSet params;
    Rng rng(5);
    Var& p = params.add("w", rng.normal_tensor({4, 3}));
    const Tensor before = p.value();
    Adam adam;
    for (int s = 0; s < 5; ++s) {
      p.grad_buffer().fill(0.0f);
      adam.step(params, 1e-3f);
    }
    CHECK(p.value().storage() == before.storage());
  }

  TEST_CASE("adam first step moves by about lr") {
    ParameterSet params;
    Var& p = params.add("w", Tensor::full({1}, 0.5f));
    p.grad_buffer().fill(1.0f);
    Adam adam;
    adam.step(params, 1e-3f);
    CHECK(p.value()[0] == doctest::Approx(0.5 - 0.001).epsilon(1e-5));
  }

  TEST_CASE("adam updates identical gradients identically") {
    ParameterSet params;
    Var a = params.add("a", Tensor::full({3}, 1.0f));
    Var b = params.add("b", Tensor::full({3}, 1.0f));
    Adam adam;
    for (int s = 0; s < 4; ++s) {
      Tensor g = Tensor::from({3}, {0.3f, -1.0f, 2.0f * s});
      a.grad_buffer() = g;
      b.grad_buffer() = g;
      adam.step(params, 1e-2f);
    }
    CHECK(a.value().storage() == b.value().storage());
  }

  TEST_CASE("adam rejects non-finite gradients") {
    ParameterSet params;
    Var& p = params.add("bad", Tensor::full({2}, 1.0f));
    p.grad_buffer()[1] = std::nanf("");
    Adam adam;
    CHECK_THROWS_AS(adam.step(params, 1e-3f), NumericError);
  }

  TEST_CASE("cosine_lr schedule") {
    CHECK(cosine_lr(0, 100, 1e-3f) == doctest::Approx(1e-3));
    CHECK(cosine_lr(100, 100, 1e-3f) == doctest::Approx(0.0));
    CHECK(cosine_lr(50, 100, 1e-3f) == doctest::Approx(5e-4));
    CHECK(cosine_lr(25, 100, 1e-3f) > cosine_lr(75, 100, 1e-3f));
    CHECK_THROWS_AS(cosine_lr(0, 0, 1e-3f), ParameterError);
    CHECK_THROWS_AS(cosine_lr(101, 100, 1e-3f), ParameterError);
  }

  TEST_CASE("grad_check on a linear loss is exact") {
    ParameterSet params;
    Rng rng(6);
    params.add("w", rng.normal_tensor({10}));
    const Tensor x = rng.normal_tensor({10});
    GradCheckResult r = grad_check(
        [&] { return ops::sum(ops::mul_const(params.get("w"), x)); }, params, 1e-3f, 10);
    CHECK(r.samples == 10);
    CHECK(r.max_error < 1e-4);
  }

  TEST_CASE("parameter outside the loss has zero gradient") {
    ParameterSet params;
    params.add("used", Tensor::full({3}, 1.0f));
    params.add("unused", Tensor::full({3}, 2.0f));
    params.zero_grad();
    Var loss = ops::sum(ops::square(params.get("used")));
    loss.backward();
    const Var& unused = params.get("unused");
    if (unused.has_grad())
      for (float g : unused.grad().data()) CHECK(g == 0.0f);
    GradCheckResult r = grad_check([&] { return ops::sum(ops::square(params.get("used"))); },
                                   params, 1e-3f, 16);
    CHECK(r.max_error < 1e-3);
  }

  TEST_CASE("no-grad guard records nothing") {
    Var w(Tensor::full({2}, 1.0f), true);
    {
      NoGradGuard guard;
      CHECK_FALSE(grad_enabled());
      Var y = ops::mul_scalar(w, 3.0f);
      CHECK_FALSE(y.requires_grad());
    }
    CHECK(grad_enabled());
  }

  TEST_CASE("finite differences match every differentiable op") {
    Rng rng(7);
    ParameterSet params;
    params.add("a", rng.normal_tensor({4, 5, 6}));
    params.add("b", rng.uniform_tensor({4, 5, 6}, 0.5f, 1.5f));
    params.add("w", rng.normal_tensor({3, 4, 3, 3}, 0.3f));
    params.add("bias", rng.normal_tensor({3}));
    params.add("g", rng.uniform_tensor({4}, 0.5f, 1.5f));
    params.add("beta", rng.normal_tensor({4}));
    auto a = [](ParameterSet& p) { return p.get("a"); };
    auto b = [](ParameterSet& p) { return p.get("b"); };

    SUBCASE("add sub mul div") {
      check_op([&](ParameterSet& p) {
        return ops::div(ops::add(ops::mul(a(p), b(p)), ops::sub(a(p), b(p))), b(p));
      }, params);
    }
    SUBCASE("scalar ops") {
      check_op([&](ParameterSet& p) { return ops::add_scalar(ops::mul_scalar(a(p), 2.5f), 1.0f); },
               params);
    }
    SUBCASE("square and abs") {
      check_op([&](ParameterSet& p) { return ops::add(ops::square(a(p)), ops::abs(b(p))); }, params);
    }
    SUBCASE("exp tanh sigmoid gelu") {
      check_op([&](ParameterSet& p) {
        return ops::add(ops::add(ops::exp(ops::mul_scalar(a(p), 0.5f)), ops::tanh(a(p))),
                        ops::add(ops::sigmoid(b(p)), ops::gelu(a(p))));
      }, params);
    }
    SUBCASE("mean") {
      check_op([&](ParameterSet& p) { return ops::mean(ops::square(a(p))); }, params);
    }
    SUBCASE("conv2d stride 1 and 2") {
      check_op([&](ParameterSet& p) {
        return ops::add(ops::conv2d(a(p), p.get("w"), p.get("bias"), 2, 1),
                        ops::conv2d(ops::slice_channels(a(p), 0, 4), p.get("w"), Var(), 2, 1));
      }, params);
      check_op([&](ParameterSet& p) { return ops::conv2d(b(p), p.get("w"), p.get("bias"), 1, 1); },
               params);
    }
    SUBCASE("pixel shuffle and unshuffle") {
      check_op([&](ParameterSet& p) {
        return ops::pixel_unshuffle(ops::pixel_shuffle(a(p), 2), 2);
      }, params);
    }
    SUBCASE("concat and slice") {
      check_op([&](ParameterSet& p) {
        return ops::concat_channels({ops::slice_channels(a(p), 1, 2), b(p)});
      }, params);
    }
    SUBCASE("layer norm over channels") {
      check_op([&](ParameterSet& p) {
        return ops::layer_norm_channels(a(p), p.get("g"), p.get("beta"));
      }, params);
    }
    SUBCASE("separable valid filter") {
      const std::vector<float> taps{0.25f, 0.5f, 0.25f};
      check_op([&](ParameterSet& p) { return ops::separable_filter_valid(b(p), taps); }, params);
    }
    SUBCASE("stop_gradient blocks the path") {
      params.zero_grad();
      Var loss = ops::sum(ops::mul(ops::stop_gradient(params.get("a")), params.get("b")));
      loss.backward();
      const Var& pa = params.get("a");
      if (pa.has_grad())
        for (float g : pa.grad().data()) CHECK(g == 0.0f);
    }
  }
}
