// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>

#include "cellprompt/errors.hpp"
#include "cellprompt/grad_check.hpp"
#include "cellprompt/lora.hpp"
#include "cellprompt/ops.hpp"
#include "cellprompt/optim.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace cellprompt;
using testing::param_grad_error;
using testing::random_tensor;

namespace {

LoraAdapter hand_adapter() {
  Rng rng(1);
  LoraAdapter ad(2, 1, rng);
  ad.a.value = Tensor::matrix({{0, 1}});
  ad.b.value = Tensor::matrix({{1}, {0}});
  return ad;
}

// Row-echelon rank with a relative pivot threshold.
std::size_t numeric_rank(Tensor m) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  double scale_ref = 0.0;
  for (double v : m.data()) scale_ref = std::max(scale_ref, std::abs(v));
  const double tol = 1e-10 * std::max(scale_ref, 1e-300);
  std::size_t rank = 0;
  for (std::size_t c = 0; c < cols && rank < rows; ++c) {
    std::size_t piv = rank;
    for (std::size_t r = rank; r < rows; ++r)
      if (std::abs(m.at(r, c)) > std::abs(m.at(piv, c))) piv = r;
    if (std::abs(m.at(piv, c)) <= tol) continue;
    for (std::size_t j = 0; j < cols; ++j) std::swap(m.at(piv, j), m.at(rank, j));
    for (std::size_t r = rank + 1; r < rows; ++r) {
      const double f = m.at(r, c) / m.at(rank, c);
      for (std::size_t j = 0; j < cols; ++j) m.at(r, j) -= f * m.at(rank, j);
    }
    ++rank;
  }
  return rank;
}

}  // namespace

TEST_CASE("adapted projection hand example") {
  const LoraAdapter ad = hand_adapter();
  const Param base(Tensor::matrix({{1, 0}, {0, 1}}), false);
  CHECK(adapted_project(Tensor::matrix({{1, 2}}), base, ad) == Tensor::matrix({{3, 2}}));
  CHECK(merge(base, ad) == Tensor::matrix({{1, 1}, {0, 1}}));
}

TEST_CASE("zero B reproduces the base projection exactly") {
  Rng rng(2);
  LoraAdapter ad(8, 3, rng);
  const Param base(random_tensor({8, 8}, rng), false);
  const Tensor x = random_tensor({5, 8}, rng);
  CHECK(adapted_project(x, base, ad) == matmul_nt(x, base.value));
  CHECK(merge(base, ad) == base.value);
}

TEST_CASE("adapted projection equals the merged matrix") {
  Rng rng(3);
  LoraAdapter ad(8, 2, rng);
  ad.b.value = random_tensor({8, 2}, rng);
  const Param base(random_tensor({8, 8}, rng), false);
  const Tensor merged = merge(base, ad);
  for (int i = 0; i < 20; ++i) {
    const Tensor x = random_tensor({3, 8}, rng);
    CHECK(max_abs_diff(adapted_project(x, base, ad), matmul_nt(x, merged)) < 1e-9);
  }
}

TEST_CASE("rank bounds and shape errors") {
  Rng rng(4);
  CHECK_THROWS_AS(LoraAdapter(4, 0, rng), ConfigError);
  CHECK_THROWS_AS(LoraAdapter(4, 5, rng), ConfigError);
  LoraAdapter ad(4, 2, rng);
  const Param base(Tensor({4, 4}), false);
  CHECK_THROWS_AS(adapted_project(Tensor({2, 3}), base, ad), DimensionError);
  CHECK_THROWS_AS(merge(Param(Tensor({3, 3})), ad), DimensionError);
  CHECK_THROWS_AS(AdaptedAttention(6, 4, 2, rng), ConfigError);
}

TEST_CASE("update matrix has rank at most r") {
  Rng rng(5);
  for (std::size_t r = 1; r <= 3; ++r) {
    LoraAdapter ad(6, r, rng);
    ad.b.value = random_tensor({6, r}, rng);
    CHECK(numeric_rank(ad.delta()) == r);
  }
}

TEST_CASE("adapter gradients match finite differences") {
  Rng rng(6);
  LoraAdapter ad(5, 2, rng);
  ad.b.value = random_tensor({5, 2}, rng);
  Param base(random_tensor({5, 5}, rng), false);
  const Tensor x = random_tensor({3, 5}, rng);
  const Tensor w = random_tensor({3, 5}, rng);
  auto loss = [&] { return testing::dot(w, adapted_project(x, base, ad)); };
  auto accumulate = [&] {
    ProjectionCache c;
    (void)adapted_project(x, base, ad, &c);
    (void)adapted_project_backward(c, base, ad, w);
  };
  ad.b.zero_grad();
  CHECK(param_grad_error(ad.a, loss, accumulate) < 1e-5);
  ad.a.zero_grad();
  CHECK(param_grad_error(ad.b, loss, accumulate) < 1e-5);
  CHECK(base.grad == Tensor({5, 5}));
}

TEST_CASE("single token attends to itself") {
  Rng rng(7);
  AdaptedAttention layer(4, 2, 1, rng);
  const Tensor x = random_tensor({1, 4}, rng);
  const Tensor v = matmul_nt(x, layer.wv.value);
  CHECK(max_abs_diff(attention_forward(x, layer), matmul_nt(v, layer.wo.value)) < 1e-12);
}

TEST_CASE("identity weights give convex combinations of the inputs") {
  Rng rng(8);
  AdaptedAttention layer(3, 1, 1, rng);
  const Tensor eye = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  layer.wq.value = layer.wk.value = layer.wv.value = layer.wo.value = eye;
  const Tensor y = attention_forward(eye, layer);
  for (std::size_t i = 0; i < 3; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(y.at(i, j) > 0.0);
      s += y.at(i, j);
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("attention adapter gradients at d=4, heads=2, n=3") {
  Rng rng(9);
  AdaptedAttention layer(4, 2, 2, rng);
  layer.adapter_q.b.value = random_tensor({4, 2}, rng, -0.5, 0.5);
  layer.adapter_v.b.value = random_tensor({4, 2}, rng, -0.5, 0.5);
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor w = random_tensor({3, 4}, rng);
  NamedParams params;
  layer.collect_params(params, "attn");
  auto loss = [&] { return testing::dot(w, layer.forward(x)); };
  auto accumulate = [&] {
    zero_grads(params);
    AdaptedAttention::Cache c;
    (void)layer.forward(x, &c);
    (void)layer.backward(c, w);
  };
  for (Param* p : {&layer.adapter_q.a, &layer.adapter_q.b, &layer.adapter_v.a, &layer.adapter_v.b}) {
    CHECK(param_grad_error(*p, loss, accumulate) < 1e-4);
  }
  AdaptedAttention::Cache c;
  (void)layer.forward(x, &c);
  const Tensor dx = layer.backward(c, w);
  const Tensor numeric = finite_difference_grad([&](const Tensor& xx) { return testing::dot(w, layer.forward(xx)); }, x,
                                                testing::kStep);
  CHECK(relative_error(dx, numeric) < 1e-4);
}

TEST_CASE("no adapter is attached to the key projection") {
  Rng rng(10);
  AdaptedAttention layer(8, 2, 2, rng);
  NamedParams params;
  layer.collect_params(params, "attn");
  for (const auto& [name, p] : params) {
    if (name.find("adapter") != std::string::npos) {
      CHECK(name.find("_k") == std::string::npos);
      CHECK(p->trainable);
    } else {
      CHECK_FALSE(p->trainable);
    }
  }
}

TEST_CASE("base weights stay bitwise frozen under optimization") {
  Rng rng(11);
  AdaptedAttention layer(8, 2, 2, rng);
  layer.set_lora_only();
  const Tensor wq = layer.wq.value, wk = layer.wk.value, wv = layer.wv.value, wo = layer.wo.value;
  const Tensor b0 = layer.adapter_q.b.value;
  NamedParams params;
  layer.collect_params(params, "attn");
  Optimizer opt(OptimizerConfig{});
  for (int step = 0; step < 10; ++step) {
    zero_grads(params);
    const Tensor x = random_tensor({4, 8}, rng);
    AdaptedAttention::Cache c;
    const Tensor y = layer.forward(x, &c);
    (void)layer.backward(c, y);
    opt.step(params);
  }
  CHECK(layer.wq.value == wq);
  CHECK(layer.wk.value == wk);
  CHECK(layer.wv.value == wv);
  CHECK(layer.wo.value == wo);
  CHECK_FALSE(layer.adapter_q.b.value == b0);
}

TEST_CASE("adapter parameter counts") {
  Rng rng(12);
  std::vector<AdaptedAttention> one;
  one.emplace_back(64, 4, 4, rng);
  const ParamCount c = count_adapter_params(one);
  CHECK(c.trainable == 1024);
  CHECK(c.frozen == 4u * 64u * 64u);
  CHECK(c.total == c.trainable + c.frozen);
  std::vector<AdaptedAttention> tiny;
  tiny.emplace_back(1, 1, 1, rng);
  CHECK(count_adapter_params(tiny).trainable == 4);
}
