#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "grad_checks.hpp"
#include "schanger/errors.hpp"
#include "schanger/ops.hpp"

using namespace schanger;
using gradsuite::rand_normal;
using gradsuite::rand_signed;

namespace {

float at4(const Tensor& t, int n, int c, int h, int w) {
  const Shape& s = t.shape();
  return t.data()[static_cast<size_t>(((n * s.c + c) * s.h + h) * s.w + w)];
}

// Independent six-loop convolution with double accumulation, used as a
// reference for the im2col/GEMM implementation.
Tensor conv_reference(const Tensor& x, const Tensor& w, const Tensor* bias,
                      const ConvSpec& s) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  const int cig = ws.c;
  const int co_per_group = ws.n / s.groups;
  const int oh = (xs.h + 2 * s.pad - s.dilation * (ws.h - 1) - 1) / s.stride + 1;
  const int ow = (xs.w + 2 * s.pad - s.dilation * (ws.w - 1) - 1) / s.stride + 1;
  Tensor y = Tensor::zeros({xs.n, ws.n, oh, ow});
  for (int n = 0; n < xs.n; ++n) {
    for (int oc = 0; oc < ws.n; ++oc) {
      const int g = oc / co_per_group;
      for (int yh = 0; yh < oh; ++yh) {
        for (int yw = 0; yw < ow; ++yw) {
          double acc = bias ? bias->data()[static_cast<size_t>(oc)] : 0.0;
          for (int ic = 0; ic < cig; ++ic) {
            for (int kh = 0; kh < ws.h; ++kh) {
              for (int kw = 0; kw < ws.w; ++kw) {
                const int ih = yh * s.stride - s.pad + kh * s.dilation;
                const int iw = yw * s.stride - s.pad + kw * s.dilation;
                if (ih < 0 || ih >= xs.h || iw < 0 || iw >= xs.w) continue;
                acc += static_cast<double>(
                           at4(x, n, g * cig + ic, ih, iw)) *
                       static_cast<double>(at4(w, oc, ic, kh, kw));
              }
            }
          }
          y.data()[static_cast<size_t>(((n * ws.n + oc) * oh + yh) * ow + yw)] =
              static_cast<float>(acc);
        }
      }
    }
  }
  return y;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (size_t i = 0; i < a.data().size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) -
                             static_cast<double>(b.data()[i])));
  }
  return m;
}

}  // namespace

TEST_CASE("conv2d matches hand values for 3x3 all-ones kernel") {
  Tensor x = Tensor::from_data({1, 1, 3, 3},
                               std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
  Tensor y = conv2d(x, w, nullptr, ConvSpec{1, 1, 1, 1});
  REQUIRE(y.shape() == Shape{1, 1, 3, 3});
  CHECK(at4(y, 0, 0, 1, 1) == doctest::Approx(45.0).epsilon(1e-6));
  CHECK(at4(y, 0, 0, 0, 0) == doctest::Approx(12.0).epsilon(1e-6));
  CHECK(at4(y, 0, 0, 2, 2) == doctest::Approx(28.0).epsilon(1e-6));
}

TEST_CASE("conv2d applies bias and stride") {
  Tensor x = Tensor::from_data({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensor w = Tensor::full({2, 1, 1, 1}, 2.0f);
  Tensor b = Tensor::from_data({1, 2, 1, 1}, std::vector<float>{10, 20});
  Tensor y = conv2d(x, w, &b, ConvSpec{2, 0, 1, 1});
  REQUIRE(y.shape() == Shape{1, 2, 1, 1});
  CHECK(at4(y, 0, 0, 0, 0) == doctest::Approx(12.0));
  CHECK(at4(y, 0, 1, 0, 0) == doctest::Approx(22.0));
}

TEST_CASE("conv2d agrees with a six-loop reference") {
  struct Cfg {
    Shape xs;
    Shape ws;
    ConvSpec spec;
    bool bias;
  };
  const Cfg cfgs[] = {
      {{2, 3, 9, 9}, {4, 3, 3, 3}, {1, 1, 1, 1}, true},
      {{1, 4, 8, 8}, {6, 4, 3, 3}, {2, 1, 1, 1}, false},
      {{1, 4, 10, 10}, {4, 1, 5, 5}, {1, 2, 1, 4}, true},
      {{1, 4, 12, 12}, {4, 1, 7, 7}, {1, 9, 3, 4}, true},
      {{2, 6, 7, 7}, {4, 3, 3, 3}, {1, 1, 1, 2}, false},
      {{1, 5, 6, 6}, {7, 5, 1, 1}, {1, 0, 1, 1}, true},
  };
  Rng rng(7);
  for (const Cfg& cfg : cfgs) {
    Tensor x = rand_normal(cfg.xs, rng, 1.0);
    Tensor w = rand_normal(cfg.ws, rng, 0.5);
    Tensor b = rand_normal({1, cfg.ws.n, 1, 1}, rng, 0.5);
    Tensor got = conv2d(x, w, cfg.bias ? &b : nullptr, cfg.spec);
    Tensor want = conv_reference(x, w, cfg.bias ? &b : nullptr, cfg.spec);
    CHECK(max_abs_diff(got, want) < 1e-4);
  }
}

TEST_CASE("conv2d validates shapes and configuration") {
  Tensor x = Tensor::zeros({1, 3, 4, 4});
  Tensor w = Tensor::zeros({2, 4, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w, nullptr, ConvSpec{1, 1, 1, 1}), ShapeError);
  Tensor w2 = Tensor::zeros({2, 3, 3, 3});
  CHECK_THROWS_AS(conv2d(x, w2, nullptr, ConvSpec{0, 1, 1, 1}), ConfigError);
  CHECK_THROWS_AS(conv2d(x, w2, nullptr, ConvSpec{1, -1, 1, 1}), ConfigError);
  Tensor bad_bias = Tensor::zeros({1, 3, 1, 1});
  CHECK_THROWS_AS(conv2d(x, w2, &bad_bias, ConvSpec{1, 1, 1, 1}), ShapeError);
}

TEST_CASE("conv2d rejects non-finite weights") {
  Tensor x = Tensor::zeros({1, 1, 4, 4});
  Tensor w = Tensor::full({1, 1, 3, 3}, 1.0f);
  w.data()[4] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(conv2d(x, w, nullptr, ConvSpec{1, 1, 1, 1}), NumericError);
}

TEST_CASE("maxpool2 picks window maxima and rejects odd dims") {
  Tensor x = Tensor::from_data(
      {1, 1, 4, 4},
      std::vector<float>{1, 2, 5, 6, 3, 4, 7, 8, -1, -2, 0, 1, -3, -4, 2, 3});
  Tensor y = maxpool2(x);
  REQUIRE(y.shape() == Shape{1, 1, 2, 2});
  CHECK(at4(y, 0, 0, 0, 0) == 4.0f);
  CHECK(at4(y, 0, 0, 0, 1) == 8.0f);
  CHECK(at4(y, 0, 0, 1, 0) == -1.0f);
  CHECK(at4(y, 0, 0, 1, 1) == 3.0f);
  CHECK_THROWS_AS(maxpool2(Tensor::zeros({1, 1, 3, 4})), ShapeError);
  CHECK_THROWS_AS(maxpool2(Tensor::zeros({1, 1, 4, 5})), ShapeError);
}

TEST_CASE("bilinear_resize uses half-pixel centers") {
  Tensor row = Tensor::from_data({1, 1, 1, 4}, std::vector<float>{1, 2, 3, 4});
  Tensor down = bilinear_resize(row, 1, 2);
  CHECK(at4(down, 0, 0, 0, 0) == doctest::Approx(1.5));
  CHECK(at4(down, 0, 0, 0, 1) == doctest::Approx(3.5));

  Tensor pair = Tensor::from_data({1, 1, 1, 2}, std::vector<float>{1, 3});
  Tensor up = bilinear_resize(pair, 1, 4);
  CHECK(at4(up, 0, 0, 0, 0) == doctest::Approx(1.0));
  CHECK(at4(up, 0, 0, 0, 1) == doctest::Approx(1.5));
  CHECK(at4(up, 0, 0, 0, 2) == doctest::Approx(2.5));
  CHECK(at4(up, 0, 0, 0, 3) == doctest::Approx(3.0));

  Rng rng(3);
  Tensor x = rand_normal({2, 3, 5, 7}, rng, 1.0);
  Tensor same = bilinear_resize(x, 5, 7);
  CHECK(max_abs_diff(same, x) < 1e-6);
  CHECK_THROWS_AS(bilinear_resize(x, 0, 4), ShapeError);
}

TEST_CASE("batchnorm normalizes with batch stats and updates buffers") {
  Tensor x = Tensor::from_data({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  Tensor gamma = Tensor::full({1, 1, 1, 1}, 1.0f);
  Tensor beta = Tensor::zeros({1, 1, 1, 1});
  Tensor rm = Tensor::zeros({1, 1, 1, 1});
  Tensor rv = Tensor::full({1, 1, 1, 1}, 1.0f);
  Tensor y = batchnorm(x, gamma, beta, rm, rv, 1e-5f, 0.1f, true);
  const double inv = 1.0 / std::sqrt(1.25 + 1e-5);
  CHECK(at4(y, 0, 0, 0, 0) == doctest::Approx(-1.5 * inv).epsilon(1e-5));
  CHECK(at4(y, 0, 0, 1, 1) == doctest::Approx(1.5 * inv).epsilon(1e-5));
  CHECK(rm.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
  CHECK(rv.data()[0] == doctest::Approx(0.9 + 0.1 * 1.25 * 4.0 / 3.0)
                            .epsilon(1e-6));

  Tensor y2 = batchnorm(x, gamma, beta, rm, rv, 1e-5f, 0.1f, false);
  const double inv2 = 1.0 / std::sqrt(static_cast<double>(rv.data()[0]) + 1e-5);
  CHECK(at4(y2, 0, 0, 0, 0) ==
        doctest::Approx((1.0 - 0.25) * inv2).epsilon(1e-5));

  CHECK_THROWS_AS(batchnorm(x, gamma, beta, rm, rv, 0.0f, 0.1f, true),
                  ConfigError);
  CHECK_THROWS_AS(batchnorm(x, gamma, beta, rm, rv, 1e-5f, 1.5f, true),
                  ConfigError);
  Tensor bad = Tensor::zeros({1, 2, 1, 1});
  CHECK_THROWS_AS(batchnorm(x, bad, beta, rm, rv, 1e-5f, 0.1f, true),
                  ShapeError);
}

TEST_CASE("layernorm_channel normalizes across channels per position") {
  Tensor x = Tensor::from_data({1, 4, 1, 1}, std::vector<float>{1, 2, 3, 4});
  Tensor gamma = Tensor::full({1, 4, 1, 1}, 1.0f);
  Tensor beta = Tensor::zeros({1, 4, 1, 1});
  Tensor y = layernorm_channel(x, gamma, beta, 1e-5f);
  const double inv = 1.0 / std::sqrt(1.25 + 1e-5);
  CHECK(at4(y, 0, 0, 0, 0) == doctest::Approx(-1.5 * inv).epsilon(1e-5));
  CHECK(at4(y, 0, 3, 0, 0) == doctest::Approx(1.5 * inv).epsilon(1e-5));
  double sum = 0.0;
  for (float v : y.data()) sum += v;
  CHECK(sum == doctest::Approx(0.0).epsilon(1e-5));
  CHECK_THROWS_AS(layernorm_channel(x, gamma, beta, 0.0f), ConfigError);
}

TEST_CASE("activations match reference values") {
  Tensor x = Tensor::from_data({1, 1, 1, 5},
                               std::vector<float>{-40, -1, 0, 1, 40});
  Tensor g = gelu(x);
  CHECK(at4(g, 0, 0, 0, 1) == doctest::Approx(-0.15865525).epsilon(1e-6));
  CHECK(at4(g, 0, 0, 0, 2) == 0.0f);
  CHECK(at4(g, 0, 0, 0, 3) == doctest::Approx(0.84134475).epsilon(1e-6));

  Tensor s = silu(x);
  CHECK(at4(s, 0, 0, 0, 2) == 0.0f);
  CHECK(at4(s, 0, 0, 0, 3) == doctest::Approx(0.73105858).epsilon(1e-6));
  CHECK(std::abs(at4(s, 0, 0, 0, 4) - 40.0f) < 1e-4);

  Tensor q = sigmoid(x);
  CHECK(at4(q, 0, 0, 0, 2) == 0.5f);
  CHECK(at4(q, 0, 0, 0, 3) == doctest::Approx(0.73105858).epsilon(1e-6));
  CHECK(at4(q, 0, 0, 0, 4) == 1.0f);
  CHECK(at4(q, 0, 0, 0, 0) >= 0.0f);
  CHECK(at4(q, 0, 0, 0, 0) < 1e-12f);

  CHECK(max_abs_diff(activation(x, Act::Gelu), g) == 0.0);
  CHECK(max_abs_diff(activation(x, Act::Silu), s) == 0.0);
  CHECK(max_abs_diff(activation(x, Act::Sigmoid), q) == 0.0);
}

TEST_CASE("elementwise arithmetic is exact and validates shapes") {
  Tensor a = Tensor::from_data({1, 1, 1, 3}, std::vector<float>{1, -2, 4});
  Tensor b = Tensor::from_data({1, 1, 1, 3}, std::vector<float>{2, 3, -2});
  CHECK(add(a, b).data()[1] == 1.0f);
  CHECK(sub(a, b).data()[2] == 6.0f);
  CHECK(mul(a, b).data()[0] == 2.0f);
  CHECK(div_ew(a, b).data()[2] == -2.0f);
  CHECK(add_scalar(a, 1.5f).data()[0] == 2.5f);
  CHECK(mul_scalar(a, -2.0f).data()[1] == 4.0f);

  Tensor c = Tensor::zeros({1, 1, 1, 4});
  CHECK_THROWS_AS(add(a, c), ShapeError);
  CHECK_THROWS_AS(mul(a, c), ShapeError);

  Tensor z = Tensor::from_data({1, 1, 1, 3}, std::vector<float>{1, 0, 1});
  CHECK_THROWS_AS(div_ew(a, z), NumericError);
}

TEST_CASE("concat and slice round trip on both axes") {
  Rng rng(11);
  Tensor a = rand_normal({2, 3, 4, 4}, rng, 1.0);
  Tensor b = rand_normal({2, 2, 4, 4}, rng, 1.0);
  Tensor cat = concat_channels(a, b);
  REQUIRE(cat.shape() == Shape{2, 5, 4, 4});
  CHECK(max_abs_diff(slice_channels(cat, 0, 3), a) == 0.0);
  CHECK(max_abs_diff(slice_channels(cat, 3, 5), b) == 0.0);
  CHECK_THROWS_AS(slice_channels(cat, 3, 3), ShapeError);
  CHECK_THROWS_AS(slice_channels(cat, 0, 6), ShapeError);

  Tensor c = rand_normal({1, 3, 4, 4}, rng, 1.0);
  Tensor catb = concat_batch(a, c);
  REQUIRE(catb.shape() == Shape{3, 3, 4, 4});
  CHECK(max_abs_diff(slice_batch(catb, 0, 2), a) == 0.0);
  CHECK(max_abs_diff(slice_batch(catb, 2, 3), c) == 0.0);
  CHECK_THROWS_AS(concat_batch(a, b), ShapeError);
}

TEST_CASE("broadcast scaling multiplies per channel and per sample") {
  Tensor x = Tensor::full({2, 2, 1, 2}, 1.0f);
  Tensor gate = Tensor::from_data({2, 2, 1, 1}, std::vector<float>{1, 2, 3, 4});
  Tensor y = scale_channels(x, gate);
  CHECK(at4(y, 0, 1, 0, 1) == 2.0f);
  CHECK(at4(y, 1, 0, 0, 0) == 3.0f);

  Tensor m = Tensor::from_data({2, 1, 1, 1}, std::vector<float>{0.5f, -1.0f});
  Tensor z = scale_samples(x, m);
  CHECK(at4(z, 0, 1, 0, 1) == 0.5f);
  CHECK(at4(z, 1, 0, 0, 0) == -1.0f);

  CHECK_THROWS_AS(scale_channels(x, m), ShapeError);
  CHECK_THROWS_AS(scale_samples(x, gate), ShapeError);
}

TEST_CASE("reductions compute means and sums") {
  Tensor x = Tensor::from_data({2, 1, 1, 2}, std::vector<float>{1, 2, 3, 5});
  Tensor g = global_avg_pool(x);
  REQUIRE(g.shape() == Shape{2, 1, 1, 1});
  CHECK(g.data()[0] == doctest::Approx(1.5));
  CHECK(g.data()[1] == doctest::Approx(4.0));
  CHECK(sum_all(x).data()[0] == doctest::Approx(11.0));
  CHECK(mean_all(x).data()[0] == doctest::Approx(2.75));
  Tensor ps = sum_per_sample(x);
  REQUIRE(ps.shape() == Shape{2, 1, 1, 1});
  CHECK(ps.data()[0] == doctest::Approx(3.0));
  CHECK(ps.data()[1] == doctest::Approx(8.0));
}

TEST_CASE("droppath is identity in eval and rescales kept samples") {
  Rng rng(5);
  Tensor x = Tensor::full({8, 1, 2, 2}, 1.0f);
  Tensor eval_y = droppath(x, 0.7f, false, rng);
  CHECK(max_abs_diff(eval_y, x) == 0.0);
  Tensor zero_rate = droppath(x, 0.0f, true, rng);
  CHECK(max_abs_diff(zero_rate, x) == 0.0);
  Tensor all_drop = droppath(x, 1.0f, true, rng);
  for (float v : all_drop.data()) CHECK(v == 0.0f);

  CHECK_THROWS_AS(droppath(x, -0.1f, true, rng), ConfigError);
  CHECK_THROWS_AS(droppath(x, 1.5f, true, rng), ConfigError);
  CHECK_THROWS_AS(droppath(x, 0.5f, true, rng, 3), ConfigError);
}

TEST_CASE("droppath keep rate matches its rate over many draws") {
  Rng rng(123);
  const float rate = 0.3f;
  Tensor x = Tensor::full({400, 1, 1, 1}, 1.0f);
  int kept = 0;
  double mean = 0.0;
  for (int rep = 0; rep < 5; ++rep) {
    Tensor y = droppath(x, rate, true, rng);
    for (float v : y.data()) {
      if (v != 0.0f) {
        ++kept;
        CHECK(v == doctest::Approx(1.0 / 0.7).epsilon(1e-6));
      }
      mean += v;
    }
  }
  const double frac = kept / 2000.0;
  CHECK(frac > 0.64);
  CHECK(frac < 0.76);
  CHECK(mean / 2000.0 == doctest::Approx(1.0).epsilon(0.06));
}

TEST_CASE("droppath ties decisions across stacked groups") {
  Rng rng(9);
  Tensor x = Tensor::full({64, 1, 1, 1}, 1.0f);
  Tensor y = droppath(x, 0.5f, true, rng, 2);
  bool any_dropped = false;
  for (int i = 0; i < 32; ++i) {
    CHECK(y.data()[static_cast<size_t>(i)] ==
          y.data()[static_cast<size_t>(32 + i)]);
    if (y.data()[static_cast<size_t>(i)] == 0.0f) any_dropped = true;
  }
  CHECK(any_dropped);
}

TEST_CASE("bce_with_logits_mean matches closed-form values") {
  Tensor zero = Tensor::zeros({1, 1, 1, 1});
  Tensor one = Tensor::full({1, 1, 1, 1}, 1.0f);
  Tensor tzero = Tensor::zeros({1, 1, 1, 1});
  CHECK(bce_with_logits_mean(zero, one).data()[0] ==
        doctest::Approx(std::log(2.0)).epsilon(1e-7));
  CHECK(bce_with_logits_mean(zero, tzero).data()[0] ==
        doctest::Approx(std::log(2.0)).epsilon(1e-7));

  Tensor big = Tensor::full({1, 1, 1, 1}, 100.0f);
  CHECK(bce_with_logits_mean(big, one).data()[0] < 1e-6);
  CHECK(bce_with_logits_mean(big, tzero).data()[0] ==
        doctest::Approx(100.0).epsilon(1e-6));
  Tensor neg = Tensor::full({1, 1, 1, 1}, -100.0f);
  CHECK(bce_with_logits_mean(neg, one).data()[0] ==
        doctest::Approx(100.0).epsilon(1e-6));

  Tensor soft = Tensor::full({1, 1, 1, 1}, 0.5f);
  CHECK_THROWS_AS(bce_with_logits_mean(zero, soft), DataError);
  Tensor bad = Tensor::full({1, 1, 1, 1},
                            std::numeric_limits<float>::infinity());
  CHECK_THROWS_AS(bce_with_logits_mean(bad, one), NumericError);
  CHECK_THROWS_AS(bce_with_logits_mean(zero, Tensor::zeros({1, 1, 1, 2})),
                  ShapeError);
}

TEST_CASE("grad_check validates its own inputs") {
  Tensor x = Tensor::full({1, 1, 1, 2}, 1.0f);
  auto nonscalar = [](std::vector<Tensor>& in) { return in[0]; };
  CHECK_THROWS_AS(grad_check(nonscalar, {x}, 1e-2), ShapeError);
  auto fine = [](std::vector<Tensor>& in) { return sum_all(in[0]); };
  CHECK_THROWS_AS(grad_check(fine, {x}, 0.0), ConfigError);
  CHECK(grad_check(fine, {x}, 1e-2) < 1e-6);
}

TEST_CASE("every op passes finite-difference checks") {
  auto cases = gradsuite::op_grad_cases();
  REQUIRE(cases.size() >= 25);
  auto result = gradsuite::run_grad_suite(cases, 3);
  INFO("worst case: ", result.worst_case, " err ", result.max_err);
  CHECK(result.max_err < 1e-3);
}
