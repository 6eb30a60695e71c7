#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "vqnerv/errors.hpp"
#include "vqnerv/gradcheck.hpp"
#include "vqnerv/losses.hpp"
#include "vqnerv/ops.hpp"
#include "vqnerv/rng.hpp"

using namespace vqnerv;

namespace {

double constant_ssim(double a, double b) {
  const SsimSettings s;
  return (2 * a * b + s.c1) / (a * a + b * b + s.c1);
}

Tensor offset(const Tensor& x, float d) {
  Tensor y = x;
  for (float& v : y.data()) v += d;
  return y;
}

}  // namespace

TEST_SUITE("losses-metrics") {
  TEST_CASE("gaussian window is normalized and symmetric") {
    std::vector<float> w = gaussian_window(11, 1.5f);
    REQUIRE(w.size() == 11);
    CHECK(std::accumulate(w.begin(), w.end(), 0.0) == doctest::Approx(1.0));
    for (int i = 0; i < 5; ++i) CHECK(w[i] == doctest::Approx(w[10 - i]));
    CHECK(*std::max_element(w.begin(), w.end()) == w[5]);
  }

  TEST_CASE("ssim of an image with itself is one") {
    Rng rng(1);
    Tensor x = rng.uniform_tensor({3, 24, 20}, 0, 1);
    CHECK(ssim(x, x) == doctest::Approx(1.0));
  }

  TEST_CASE("ssim of constant images has the closed form") {
    for (auto [a, b] : {std::pair{0.2f, 0.5f}, std::pair{0.7f, 0.7f}, std::pair{0.0f, 1.0f}}) {
      CHECK(ssim(Tensor::full({3, 16, 16}, a), Tensor::full({3, 16, 16}, b)) ==
            doctest::Approx(constant_ssim(a, b)).epsilon(1e-4));
    }
  }

  TEST_CASE("ssim is symmetric and bounded") {
    Rng rng(2);
    Tensor x = rng.uniform_tensor({3, 20, 20}, 0, 1), y = rng.uniform_tensor({3, 20, 20}, 0, 1);
    CHECK(ssim(x, y) == doctest::Approx(ssim(y, x)).epsilon(1e-6));
    CHECK(ssim(x, y) <= 1.0);
    CHECK(ssim(x, y) >= -1.0);
    CHECK_THROWS_AS(ssim(x, Tensor({3, 20, 21})), DimensionError);
  }

  TEST_CASE("small images shrink the window") {
    Rng rng(3);
    Tensor x = rng.uniform_tensor({3, 6, 40}, 0, 1);
    CHECK(ssim(x, x) == doctest::Approx(1.0));
    CHECK(ssim_map(Var(x), Var(x)).shape()[1] >= 1);
  }

  TEST_CASE("reconstruction loss") {
    Rng rng(4);
    Tensor x = rng.uniform_tensor({3, 16, 16}, 0.1f, 0.8f);
    CHECK(reconstruction_loss(Var(x), x, 0.7f).value()[0] == doctest::Approx(0.0).epsilon(1e-6));

    Tensor flat = Tensor::full({3, 16, 16}, 0.4f);
    const double expect = 0.7 * 0.1 + 0.3 * (1.0 - constant_ssim(0.5, 0.4));
    CHECK(reconstruction_loss(Var(offset(flat, 0.1f)), flat, 0.7f).value()[0] ==
          doctest::Approx(expect).epsilon(1e-4));

    Tensor y = rng.uniform_tensor({3, 16, 16}, 0, 1);
    double mae = 0;
    for (std::size_t i = 0; i < y.size(); ++i) mae += std::abs(y[i] - x[i]) / y.size();
    CHECK(reconstruction_loss(Var(y), x, 1.0f).value()[0] == doctest::Approx(mae).epsilon(1e-5));
  }

  TEST_CASE("L1 term falls monotonically toward the target") {
    Rng rng(5);
    Tensor x = rng.uniform_tensor({3, 16, 16}, 0, 1), x0 = rng.uniform_tensor({3, 16, 16}, 0, 1);
    double last = 1e9;
    for (int k = 0; k <= 10; ++k) {
      const float lambda = k / 10.0f;
      Tensor xh(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) xh[i] = lambda * x[i] + (1 - lambda) * x0[i];
      const double v = reconstruction_loss(Var(xh), x, 1.0f).value()[0];
      CHECK(v <= last);
      last = v;
    }
    CHECK(last == doctest::Approx(0.0).epsilon(1e-6));
  }

  TEST_CASE("reconstruction loss gradient") {
    Rng rng(6);
    ParameterSet params;
    params.add("xh", rng.uniform_tensor({3, 14, 14}, 0.2f, 0.8f));
    const Tensor x = rng.uniform_tensor({3, 14, 14}, 0, 1);
    GradCheckResult r =
        grad_check([&] { return reconstruction_loss(params.get("xh"), x, 0.7f); }, params, 1e-3f, 40);
    CHECK(r.max_error < 1e-2);
  }

  TEST_CASE("inpainting loss with an empty mask is the reconstruction loss") {
    Rng rng(7);
    Tensor x = rng.uniform_tensor({3, 16, 16}, 0, 1), y = rng.uniform_tensor({3, 16, 16}, 0, 1);
    CHECK(inpainting_loss(Var(y), x, Tensor::zeros({16, 16}), 0.7f).value()[0] ==
          doctest::Approx(reconstruction_loss(Var(y), x, 0.7f).value()[0]).epsilon(1e-5));
  }

  TEST_CASE("inpainting loss with a full mask is zero") {
    Rng rng(8);
    Tensor x = rng.uniform_tensor({3, 16, 16}, 0, 1), y = rng.uniform_tensor({3, 16, 16}, 0, 1);
    CHECK(inpainting_loss(Var(y), x, Tensor::full({16, 16}, 1.0f), 0.7f).value()[0] == 0.0f);
  }

  TEST_CASE("half mask halves the L1 term") {
    Tensor x = Tensor::full({3, 16, 16}, 0.3f);
    Tensor mask({16, 16});
    for (int h = 0; h < 16; ++h)
      for (int w = 8; w < 16; ++w) mask[h * 16 + w] = 1.0f;
    const double l1 = inpainting_loss(Var(offset(x, 0.1f)), x, mask, 1.0f).value()[0];
    CHECK(l1 == doctest::Approx(0.05).epsilon(1e-5));
    CHECK_THROWS_AS(inpainting_loss(Var(x), x, Tensor({16, 15}), 1.0f), DimensionError);
  }

  TEST_CASE("masked pixels get no gradient") {
    Rng rng(9);
    Var xh(rng.uniform_tensor({3, 20, 20}, 0, 1), true);
    const Tensor x = rng.uniform_tensor({3, 20, 20}, 0, 1);
    Tensor mask({20, 20});
    for (int h = 4; h < 9; ++h)
      for (int w = 6; w < 11; ++w) mask[h * 20 + w] = 1.0f;
    inpainting_loss(xh, x, mask, 0.7f).backward();
    int unmasked_nonzero = 0;
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 400; ++i) {
        const float g = xh.grad()[c * 400 + i];
        if (mask[i] > 0.5f) CHECK(g == 0.0f);
        else if (g != 0.0f) ++unmasked_nonzero;
      }
    CHECK(unmasked_nonzero > 0);

    ParameterSet params;
    params.add("xh", xh.value());
    GradCheckResult r = grad_check([&] { return inpainting_loss(params.get("xh"), x, mask, 0.7f); },
                                   params, 1e-3f, 40);
    CHECK(r.max_error < 1e-2);
  }

  TEST_CASE("psnr") {
    Tensor x = Tensor::full({3, 8, 8}, 0.5f);
    CHECK(psnr(x, x) == kPsnrCap);
    CHECK(psnr(offset(x, 0.1f), x) == doctest::Approx(20.0).epsilon(1e-4));
    CHECK(mse(offset(x, 0.1f), x) == doctest::Approx(0.01).epsilon(1e-4));

    Rng rng(10);
    Tensor a = rng.uniform_tensor({3, 4, 4}, 0, 1), b = rng.uniform_tensor({3, 4, 4}, 0, 1);
    std::vector<int> perm(a.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    Tensor pa(a.shape()), pb(b.shape());
    for (std::size_t i = 0; i < perm.size(); ++i) {
      pa[i] = a[perm[i]];
      pb[i] = b[perm[i]];
    }
    CHECK(psnr(pa, pb) == doctest::Approx(psnr(a, b)).epsilon(1e-9));
  }

  TEST_CASE("metrics csv") {
    std::ostringstream os;
    write_metrics_csv(os, {{0, 30.5, 0.9}, {1, 31.25, 0.95}});
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == "frame_index,psnr_db,ssim");
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 2);
  }
}
