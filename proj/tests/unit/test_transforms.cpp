#include <doctest.h>

#include <cmath>

#include "vqnerv/errors.hpp"
#include "vqnerv/gradcheck.hpp"
#include "vqnerv/ops.hpp"
#include "vqnerv/transforms.hpp"

using namespace vqnerv;

namespace {

CouplingBlock make_block(ParameterSet& params, Rng& rng, int a, int b, int kernel = 1) {
  CouplingSettings s;
  s.split_a = a;
  s.split_b = b;
  s.kernel = kernel;
  return CouplingBlock(params, "c", s, rng);
}

}  // namespace

TEST_SUITE("transforms") {
  TEST_CASE("haar of a constant image") {
    Tensor y = haar_forward(Tensor::full({2, 4, 6}, 0.3f));
    REQUIRE(y.shape() == Shape{8, 2, 3});
    for (int c = 0; c < 8; ++c)
      for (int h = 0; h < 2; ++h)
        for (int w = 0; w < 3; ++w)
          CHECK(y.at(c, h, w) == doctest::Approx(c < 2 ? 0.6 : 0.0).epsilon(1e-6));
  }

  TEST_CASE("haar of the known patch") {
    Tensor x = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
    Tensor y = haar_forward(x);
    CHECK(y[0] == doctest::Approx(5));
    CHECK(y[1] == doctest::Approx(-1));
    CHECK(y[2] == doctest::Approx(-2));
    CHECK(y[3] == doctest::Approx(0));
    CHECK(haar_inverse(y).max_abs_diff(x) < 1e-6f);
  }

  TEST_CASE("haar inverse of zeros is zero") {
    Tensor x = haar_inverse(Tensor::zeros({8, 3, 2}));
    CHECK(x.shape() == Shape{2, 6, 4});
    for (float v : x.data()) CHECK(v == 0.0f);
  }

  TEST_CASE("haar round trips and preserves the norm") {
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor x = rng.normal_tensor({3, 16, 8});
      Tensor y = haar_forward(x);
      CHECK(haar_inverse(y).max_abs_diff(x) < 1e-6f);
      CHECK(std::sqrt(y.squared_norm()) == doctest::Approx(std::sqrt(x.squared_norm())).epsilon(1e-5));
      CHECK(haar_forward(haar_inverse(y)).max_abs_diff(y) < 1e-6f);
      Tensor y3 = haar_forward(x, 3);
      CHECK(y3.shape() == Shape{192, 2, 1});
      CHECK(haar_inverse(y3, 3).max_abs_diff(x) < 1e-6f);
      CHECK(std::sqrt(y3.squared_norm()) == doctest::Approx(std::sqrt(x.squared_norm())).epsilon(1e-5));
    }
  }

  TEST_CASE("haar rejects odd dimensions") {
    CHECK_THROWS_AS(haar_forward(Tensor({1, 3, 4})), DimensionError);
    CHECK_THROWS_AS(haar_inverse(Tensor({3, 2, 2})), DimensionError);
    CHECK_THROWS_AS(haar_forward(Tensor({1, 4, 4}), 3), DimensionError);
  }

  TEST_CASE("haar gradients are the adjoint transform") {
    Rng rng(2);
    ParameterSet params;
    params.add("x", rng.normal_tensor({2, 8, 8}));
    const Tensor probe = rng.normal_tensor({32, 2, 2});
    GradCheckResult r = grad_check(
        [&] { return ops::sum(ops::mul_const(haar_forward(params.get("x"), 2), probe)); }, params,
        1e-3f, 32);
    CHECK(r.max_error < 1e-2);
    params.add("y", rng.normal_tensor({32, 2, 2}));
    params.zero_grad();
    const Tensor probe2 = rng.normal_tensor({2, 8, 8});
    r = grad_check(
        [&] { return ops::sum(ops::mul_const(haar_inverse(params.get("y"), 2), probe2)); }, params,
        1e-3f, 32);
    CHECK(r.max_error < 1e-2);
  }

  TEST_CASE("fresh coupling block is the identity") {
    Rng rng(3);
    ParameterSet params;
    CouplingBlock block = make_block(params, rng, 4, 6);
    Var x(rng.normal_tensor({4, 3, 5})), f(rng.normal_tensor({6, 3, 5}));
    auto [v1, v2] = block.forward(x, f);
    CHECK(v1.value().max_abs_diff(x.value()) == 0.0f);
    CHECK(v2.value().max_abs_diff(f.value()) == 0.0f);
    auto [f_hat, x_hat] = block.inverse(x, f);
    CHECK(f_hat.value().max_abs_diff(f.value()) == 0.0f);
    CHECK(x_hat.value().max_abs_diff(x.value()) == 0.0f);
  }

  TEST_CASE("zero f with zero shifts gives zero v2") {
    Rng rng(4);
    ParameterSet params;
    CouplingBlock block = make_block(params, rng, 3, 3);
    block.randomize(rng);
    for (auto& [name, v] : params)
      if (name.find(".t1.") != std::string::npos || name.find(".t2.") != std::string::npos)
        v.mutable_value().fill(0.0f);
    auto [v1, v2] = block.forward(Var(rng.normal_tensor({3, 4, 4})), Var(Tensor::zeros({3, 4, 4})));
    for (float v : v2.value().data()) CHECK(v == 0.0f);
  }

  TEST_CASE("coupling round trip with random weights") {
    Rng rng(5);
    for (int kernel : {1, 3}) {
      ParameterSet params;
      CouplingBlock block = make_block(params, rng, 5, 7, kernel);
      for (int trial = 0; trial < 10; ++trial) {
        block.randomize(rng, 0.5f);
        Var x(rng.normal_tensor({5, 4, 6})), f(rng.normal_tensor({7, 4, 6}));
        auto [v1, v2] = block.forward(x, f);
        auto [f_hat, x_hat] = block.inverse(v1, v2);
        CHECK(x_hat.value().max_abs_diff(x.value()) < 1e-5f);
        CHECK(f_hat.value().max_abs_diff(f.value()) < 1e-5f);
      }
    }
  }

  TEST_CASE("v2 equal to t1(v1) inverts to zero f") {
    Rng rng(6);
    ParameterSet params;
    CouplingBlock block = make_block(params, rng, 4, 4);
    block.randomize(rng);
    Var v1(rng.normal_tensor({4, 3, 3}));
    Var v2 = block.t1(v1);
    auto [f_hat, x_hat] = block.inverse(v1, v2);
    for (float v : f_hat.value().data()) CHECK(std::abs(v) < 1e-6f);
  }

  TEST_CASE("coupling gradients") {
    Rng rng(7);
    ParameterSet params;
    CouplingBlock block = make_block(params, rng, 3, 4, 3);
    block.randomize(rng, 0.5f);
    params.add("x", rng.normal_tensor({3, 4, 4}));
    params.add("f", rng.normal_tensor({4, 4, 4}));
    const Tensor p1 = rng.normal_tensor({3, 4, 4}), p2 = rng.normal_tensor({4, 4, 4});
    GradCheckResult r = grad_check(
        [&] {
          auto [v1, v2] = block.forward(params.get("x"), params.get("f"));
          auto [fh, xh] = block.inverse(ops::mul_scalar(v1, 1.1f), v2);
          return ops::add(ops::sum(ops::mul_const(fh, p2)), ops::sum(ops::mul_const(xh, p1)));
        },
        params, 1e-3f, 64);
    INFO(r.worst_parameter);
    CHECK(r.max_error < 1e-2);
  }
}
