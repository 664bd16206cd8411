// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>

#include "cellprompt/errors.hpp"
#include "cellprompt/ops.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace cellprompt;
using testing::op_grad_error;
using testing::random_tensor;

namespace {

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(0), b.dim(1)});
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < b.dim(1); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.dim(1); ++p) s += a.at(i, p) * b.at(p, j);
      c.at(i, j) = s;
    }
  }
  return c;
}

Tensor naive_conv(const Tensor& x, const Tensor& k, int stride, int pad) {
  const long c = static_cast<long>(x.dim(0)), h = static_cast<long>(x.dim(1)), w = static_cast<long>(x.dim(2));
  const long f = static_cast<long>(k.dim(0)), kh = static_cast<long>(k.dim(2)), kw = static_cast<long>(k.dim(3));
  const long oh = (h + 2 * pad - kh) / stride + 1, ow = (w + 2 * pad - kw) / stride + 1;
  Tensor out({static_cast<std::size_t>(f), static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  for (long o = 0; o < f; ++o) {
    for (long y = 0; y < oh; ++y) {
      for (long xx = 0; xx < ow; ++xx) {
        double s = 0.0;
        for (long ch = 0; ch < c; ++ch) {
          for (long i = 0; i < kh; ++i) {
            for (long j = 0; j < kw; ++j) {
              const long iy = y * stride - pad + i, ix = xx * stride - pad + j;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              s += x[(ch * h + iy) * w + ix] * k[((o * c + ch) * kh + i) * kw + j];
            }
          }
        }
        out[(o * oh + y) * ow + xx] = s;
      }
    }
  }
  return out;
}

// Scatter form: each input pixel adds k-weighted copies at stride offsets.
Tensor naive_conv_transpose(const Tensor& x, const Tensor& k, std::size_t stride) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), f = k.dim(1), kk = k.dim(2);
  const std::size_t oh = (h - 1) * stride + kk, ow = (w - 1) * stride + kk;
  Tensor out({f, oh, ow});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        for (std::size_t o = 0; o < f; ++o) {
          for (std::size_t i = 0; i < kk; ++i) {
            for (std::size_t j = 0; j < kk; ++j) {
              out[(o * oh + y * stride + i) * ow + xx * stride + j] +=
                  x[(ch * h + y) * w + xx] * k[((ch * f + o) * kk + i) * kk + j];
            }
          }
        }
      }
    }
  }
  return out;
}

double bilinear_oracle(const Tensor& src, std::size_t h, std::size_t w, int factor, std::size_t oy, std::size_t ox) {
  auto coord = [&](std::size_t o, std::size_t n) {
    const double s = (static_cast<double>(o) + 0.5) / factor - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(n - 1));
  };
  const double sy = coord(oy, h), sx = coord(ox, w);
  const std::size_t y0 = static_cast<std::size_t>(std::floor(sy)), x0 = static_cast<std::size_t>(std::floor(sx));
  const std::size_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double fy = sy - y0, fx = sx - x0;
  return (1 - fy) * ((1 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1]) +
         fy * ((1 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1]);
}

}  // namespace

TEST_CASE("matmul examples") {
  CHECK(matmul(Tensor::matrix({{1, 0}, {0, 1}}), Tensor::matrix({{1}, {2}})) == Tensor::matrix({{1}, {2}}));
  CHECK(matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5}, {6}})) == Tensor::matrix({{17}, {39}}));
  const MatmulGrads g = matmul_backward(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}), Tensor::matrix({{1}}));
  CHECK(g.da == Tensor::matrix({{3, 4}}));
  CHECK(g.db == Tensor::matrix({{1}, {2}}));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  try {
    (void)matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("gemm kernels agree with a triple loop across blocking edges") {
  Rng rng(11);
  const std::size_t sizes[][3] = {{1, 1, 1}, {3, 5, 7}, {4, 8, 128}, {5, 9, 129}, {9, 257, 3}, {13, 300, 260}};
  for (const auto& s : sizes) {
    const Tensor a = random_tensor({s[0], s[2]}, rng);
    const Tensor b = random_tensor({s[2], s[1]}, rng);
    const Tensor ref = naive_matmul(a, b);
    CHECK(max_abs_diff(matmul(a, b), ref) < 1e-12);
    CHECK(max_abs_diff(matmul_nt(a, transpose(b)), ref) < 1e-12);
    CHECK(max_abs_diff(matmul_tn(transpose(a), b), ref) < 1e-12);
  }
}

TEST_CASE("matmul is associative on random 4x4 chains") {
  Rng rng(3);
  for (int t = 0; t < 10; ++t) {
    const Tensor a = random_tensor({4, 4}, rng), b = random_tensor({4, 4}, rng), c = random_tensor({4, 4}, rng);
    CHECK(max_abs_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-9);
  }
}

TEST_CASE("elementwise examples") {
  CHECK(sigmoid(0.0) == 0.5);
  CHECK(softmax_rows(Tensor::matrix({{0, 0}})) == Tensor::matrix({{0.5, 0.5}}));
  CHECK(relu(Tensor::vector({-1, 2})) == Tensor::vector({0, 2}));
  CHECK(neg(Tensor::vector({1, -2})) == Tensor::vector({-1, 2}));
  CHECK(add(Tensor::vector({1, 2}), Tensor::scalar(1)) == Tensor::vector({2, 3}));
  CHECK(mul(Tensor::scalar(2), Tensor::vector({1, 2})) == Tensor::vector({2, 4}));
  CHECK_THROWS_AS(log(Tensor::vector({1, 0})), DomainError);
  CHECK_THROWS_AS(log(Tensor::vector({-1})), DomainError);
  CHECK_THROWS_AS(add(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), DimensionError);
}

TEST_CASE("sigmoid stays strictly inside (0, 1)") {
  Rng rng(5);
  const Tensor x = random_tensor({200}, rng, -30.0, 30.0);
  const Tensor y = sigmoid(x);
  for (double v : y.data()) {
    CHECK(v > 0.0);
    CHECK(v < 1.0);
  }
}

TEST_CASE("finite difference examples") {
  const Tensor g1 = finite_difference_grad([](const Tensor& x) { return x[0] * x[0] + x[1] * x[1]; },
                                           Tensor::vector({1, 2}), 1e-5);
  CHECK(g1[0] == doctest::Approx(2.0).epsilon(1e-8));
  CHECK(g1[1] == doctest::Approx(4.0).epsilon(1e-8));
  const Tensor g2 = finite_difference_grad([](const Tensor& x) { return x[0] * x[1]; }, Tensor::vector({3, 5}), 1e-5);
  CHECK(g2[0] == doctest::Approx(5.0).epsilon(1e-8));
  CHECK(g2[1] == doctest::Approx(3.0).epsilon(1e-8));
  const Tensor g3 = finite_difference_grad([](const Tensor& x) { return sigmoid(x).sum(); }, Tensor::vector({0}), 1e-5);
  CHECK(g3[0] == doctest::Approx(0.25).epsilon(1e-8));
  CHECK_THROWS_AS(finite_difference_grad([](const Tensor&) -> double { throw DomainError("boom"); },
                                         Tensor::vector({1}), 1e-5),
                  DomainError);
}

TEST_CASE("conv2d examples") {
  CHECK(conv2d(Tensor({1, 3, 3}, 1.0), Tensor({1, 1, 1, 1}, 2.0), 1, 0) == Tensor({1, 3, 3}, 2.0));
  const Tensor x({1, 2, 2}, {1, 2, 3, 4});
  CHECK(conv2d(x, Tensor({1, 1, 2, 2}, 1.0), 1, 0) == Tensor({1, 1, 1}, {10}));
  CHECK_THROWS_AS(conv2d(x, Tensor({1, 1, 3, 3}, 1.0), 1, 0), DimensionError);
  CHECK_THROWS_AS(conv2d(x, Tensor({1, 2, 1, 1}, 1.0), 1, 0), DimensionError);
}

TEST_CASE("conv2d kernel gradient on a 1x4x4 input") {
  Rng rng(8);
  const Tensor x = random_tensor({1, 4, 4}, rng);
  const Tensor k = random_tensor({2, 1, 3, 3}, rng);
  const double err = op_grad_error([&](const Tensor& kk) { return conv2d(x, kk, 1, 1); },
                                   [&](const Tensor& kk, const Tensor& dy) { return conv2d_backward(x, kk, 1, 1, dy).dkernels; },
                                   k, rng);
  CHECK(err < 1e-6);
}

TEST_CASE("conv2d and transposed conv match direct loops") {
  Rng rng(21);
  for (int stride = 1; stride <= 2; ++stride) {
    for (int pad = 0; pad <= 2; ++pad) {
      const Tensor x = random_tensor({3, 7, 6}, rng);
      const Tensor k = random_tensor({4, 3, 3, 3}, rng);
      CHECK(max_abs_diff(conv2d(x, k, stride, pad), naive_conv(x, k, stride, pad)) < 1e-12);
    }
  }
  const Tensor x = random_tensor({3, 4, 5}, rng);
  const Tensor k = random_tensor({3, 2, 2, 2}, rng);
  CHECK(max_abs_diff(conv_transpose2d(x, k, 2), naive_conv_transpose(x, k, 2)) < 1e-12);
}

TEST_CASE("bilinear upsampling matches a half-pixel oracle") {
  Rng rng(4);
  const Tensor x = random_tensor({5, 4}, rng);
  for (int factor = 1; factor <= 3; ++factor) {
    const Tensor y = upsample_bilinear(x, factor);
    REQUIRE(y.shape() == Shape{5u * factor, 4u * factor});
    double worst = 0.0;
    for (std::size_t oy = 0; oy < y.dim(0); ++oy) {
      for (std::size_t ox = 0; ox < y.dim(1); ++ox) {
        worst = std::max(worst, std::abs(y.at(oy, ox) - bilinear_oracle(x, 5, 4, factor, oy, ox)));
      }
    }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("maxpool, nearest upsampling and channel helpers") {
  const Tensor x({1, 2, 2}, {1, 4, 3, 2});
  const MaxPoolResult p = maxpool2(x);
  CHECK(p.out == Tensor({1, 1, 1}, {4}));
  CHECK(maxpool2_backward(x.shape(), p.argmax, Tensor({1, 1, 1}, {5})) == Tensor({1, 2, 2}, {0, 5, 0, 0}));
  CHECK_THROWS_AS(maxpool2(Tensor({1, 3, 2})), DimensionError);
  CHECK(upsample_nearest2(Tensor({1, 1, 1}, {7})) == Tensor({1, 2, 2}, 7.0));
  const Tensor a({1, 1, 2}, {1, 2}), b({2, 1, 2}, {3, 4, 5, 6});
  const Tensor ab = concat_channels(a, b);
  CHECK(ab == Tensor({3, 1, 2}, {1, 2, 3, 4, 5, 6}));
  const auto [a2, b2] = split_channels(ab, 1);
  CHECK(a2 == a);
  CHECK(b2 == b);
}

TEST_CASE("layer norm output is standardized before the affine map") {
  Rng rng(6);
  const Tensor x = random_tensor({5, 16}, rng, -3.0, 3.0);
  const Tensor y = layer_norm(x, Tensor({16}, 1.0), Tensor({16}), 1e-12);
  for (std::size_t i = 0; i < 5; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 16; ++j) mean += y.at(i, j) / 16.0;
    for (std::size_t j = 0; j < 16; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean) / 16.0;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("every differentiable op matches central differences at 10 random inputs") {
  Rng rng(1234);
  constexpr double kTol = 1e-4;
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor b = random_tensor({3, 2}, rng);
    const Tensor a = random_tensor({4, 3}, rng);
    CHECK(op_grad_error([&](const Tensor& x) { return matmul(x, b); },
                        [&](const Tensor& x, const Tensor& dy) { return matmul_backward(x, b, dy).da; }, a, rng) < kTol);
    CHECK(op_grad_error([&](const Tensor& x) { return matmul(a, x); },
                        [&](const Tensor& x, const Tensor& dy) { return matmul_backward(a, x, dy).db; }, b, rng) < kTol);

    const Tensor other = random_tensor({6}, rng);
    const Tensor v = random_tensor({6}, rng);
    CHECK(op_grad_error([&](const Tensor& x) { return add(x, other); },
                        [&](const Tensor& x, const Tensor& dy) { return add_backward(x, other, dy).da; }, v, rng) < kTol);
    CHECK(op_grad_error([&](const Tensor& x) { return mul(x, other); },
                        [&](const Tensor& x, const Tensor& dy) { return mul_backward(x, other, dy).da; }, v, rng) < kTol);
    CHECK(op_grad_error([&](const Tensor& x) { return mul(other, x); },
                        [&](const Tensor& x, const Tensor& dy) { return mul_backward(other, x, dy).db; }, v, rng) < kTol);
    CHECK(op_grad_error([](const Tensor& x) { return sigmoid(x); },
                        [](const Tensor& x, const Tensor& dy) { return sigmoid_backward(sigmoid(x), dy); }, v, rng) < kTol);
    Tensor shifted = v;  // keep ReLU inputs away from the kink
    for (double& e : shifted.data()) e += e >= 0.0 ? 0.1 : -0.1;
    CHECK(op_grad_error([](const Tensor& x) { return relu(x); },
                        [](const Tensor& x, const Tensor& dy) { return relu_backward(x, dy); }, shifted, rng) < kTol);
    const Tensor positive = random_tensor({6}, rng, 0.2, 2.0);
    CHECK(op_grad_error([](const Tensor& x) { return log(x); },
                        [](const Tensor& x, const Tensor& dy) { return log_backward(x, dy); }, positive, rng) < kTol);
    const Tensor logits = random_tensor({3, 5}, rng, -2.0, 2.0);
    CHECK(op_grad_error([](const Tensor& x) { return softmax_rows(x); },
                        [](const Tensor& x, const Tensor& dy) { return softmax_rows_backward(softmax_rows(x), dy); },
                        logits, rng) < kTol);

    const Tensor gamma = random_tensor({5}, rng), beta = random_tensor({5}, rng);
    CHECK(op_grad_error([&](const Tensor& x) { return layer_norm(x, gamma, beta, 1e-9); },
                        [&](const Tensor& x, const Tensor& dy) {
                          LayerNormCache c;
                          (void)layer_norm(x, gamma, beta, 1e-9, &c);
                          return layer_norm_backward(c, gamma, dy).dx;
                        },
                        logits, rng) < kTol);

    const Tensor img = random_tensor({2, 6, 6}, rng);
    const Tensor k = random_tensor({3, 2, 3, 3}, rng);
    CHECK(op_grad_error([&](const Tensor& x) { return conv2d(x, k, 2, 1); },
                        [&](const Tensor& x, const Tensor& dy) { return conv2d_backward(x, k, 2, 1, dy).dinput; }, img, rng) <
          kTol);
    CHECK(op_grad_error([&](const Tensor& kk) { return conv2d(img, kk, 1, 1); },
                        [&](const Tensor& kk, const Tensor& dy) { return conv2d_backward(img, kk, 1, 1, dy).dkernels; }, k,
                        rng) < kTol);
    const Tensor tk = random_tensor({2, 3, 2, 2}, rng);
    CHECK(op_grad_error([&](const Tensor& x) { return conv_transpose2d(x, tk, 2); },
                        [&](const Tensor& x, const Tensor& dy) { return conv_transpose2d_backward(x, tk, 2, dy).dinput; },
                        img, rng) < kTol);
    CHECK(op_grad_error([&](const Tensor& kk) { return conv_transpose2d(img, kk, 2); },
                        [&](const Tensor& kk, const Tensor& dy) { return conv_transpose2d_backward(img, kk, 2, dy).dkernels; },
                        tk, rng) < kTol);
    const Tensor bias = random_tensor({2}, rng);
    CHECK(op_grad_error([&](const Tensor& bb) { return add_channel_bias(img, bb); },
                        [](const Tensor&, const Tensor& dy) { return channel_bias_backward(dy); }, bias, rng) < kTol);
    CHECK(op_grad_error([](const Tensor& x) { return maxpool2(x).out; },
                        [](const Tensor& x, const Tensor& dy) { return maxpool2_backward(x.shape(), maxpool2(x).argmax, dy); },
                        img, rng) < kTol);
    CHECK(op_grad_error([](const Tensor& x) { return upsample_nearest2(x); },
                        [](const Tensor&, const Tensor& dy) { return upsample_nearest2_backward(dy); }, img, rng) < kTol);
    CHECK(op_grad_error([](const Tensor& x) { return upsample_bilinear(x, 2); },
                        [](const Tensor&, const Tensor& dy) { return upsample_bilinear_backward(dy, 2); }, img, rng) < kTol);
  }
}

TEST_CASE("frozen parameters never accumulate gradient") {
  Param p(Tensor({2}, 1.0), false);
  p.accumulate(Tensor({2}, 3.0));
  CHECK(p.grad == Tensor({2}));
  p.trainable = true;
  p.accumulate(Tensor({2}, 3.0));
  CHECK(p.grad == Tensor({2}, 3.0));
}

TEST_CASE("tensor invariants") {
  CHECK(Tensor({2, 3}).size() == 6);
  CHECK_THROWS(Tensor({2, 0}));
  CHECK_THROWS(Tensor({2, 2}, std::vector<double>{1, 2, 3}));
  CHECK(Tensor({2, 3}).reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS(Tensor({2, 3}).reshaped({4, 2}));
  CHECK_FALSE(Tensor({1}, {std::nan("")}).all_finite());
}

TEST_CASE("non-finite values propagate through relu and pooling") {
  const double nan = std::nan("");
  CHECK(std::isnan(relu(Tensor::vector({nan}))[0]));
  CHECK(std::isnan(maxpool2(Tensor({1, 2, 2}, {1.0, nan, 0.0, 2.0})).out[0]));
}
