// SPDX-License-Identifier: Apache-2.0
#include <cmath>

#include "cellprompt/errors.hpp"
#include "cellprompt/image_encoder.hpp"
#include "cellprompt/ops.hpp"
#include "cellprompt/optim.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace cellprompt;
using testing::random_tensor;

namespace {

EncoderConfig small_config() {
  EncoderConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 8;
  cfg.width = 8;
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.lora_rank = 2;
  return cfg;
}

std::size_t trainable_count(ImageEncoder& enc) {
  NamedParams params;
  enc.collect_params(params);
  return count_params(params).trainable;
}

}  // namespace

TEST_CASE("default encoder emits a 64x8x8 grid") {
  Rng rng(1);
  const ImageEncoder enc(EncoderConfig{}, rng);
  const ImageEmbedding e = encode(random_tensor({1, 64, 64}, rng, 0.0, 1.0), enc);
  CHECK(e.grid.shape() == Shape{64, 8, 8});
  CHECK(e.grid.all_finite());
  CHECK_THROWS_AS((void)encode(Tensor({1, 32, 32}), enc), DimensionError);
}

TEST_CASE("config validation") {
  EncoderConfig cfg;
  cfg.patch_size = 7;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = EncoderConfig{};
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("patchify orders patches row-major") {
  Tensor img({1, 4, 4});
  for (std::size_t i = 0; i < 16; ++i) img[i] = static_cast<double>(i);
  const Tensor p = patchify(img, 2);
  CHECK(p.shape() == Shape{4, 4});
  CHECK(p == Tensor::matrix({{0, 1, 4, 5}, {2, 3, 6, 7}, {8, 9, 12, 13}, {10, 11, 14, 15}}));
}

TEST_CASE("grid and token views round trip") {
  Rng rng(2);
  const Tensor g = random_tensor({5, 3, 3}, rng);
  const Tensor t = grid_to_tokens(g);
  CHECK(t.shape() == Shape{9, 5});
  CHECK(t.at(4, 2) == g.at(2, 1, 1));
  CHECK(tokens_to_grid(t, 3) == g);
}

TEST_CASE("zero image with zero positional embedding gives a constant grid") {
  Rng rng(3);
  ImageEncoder enc(small_config(), rng);
  enc.pos_embed.value.fill(0.0);
  const Tensor g = encode(Tensor({1, 16, 16}), enc).grid;
  for (std::size_t c = 0; c < g.dim(0); ++c) {
    for (std::size_t i = 0; i < 4; ++i) CHECK(g[c * 4 + i] == doctest::Approx(g[c * 4]).epsilon(1e-12));
  }
}

TEST_CASE("trainable policies") {
  Rng rng(4);
  const EncoderConfig cfg = small_config();
  ImageEncoder enc(cfg, rng);
  set_trainable_policy(enc, TrainablePolicy::lora_only);
  CHECK(trainable_count(enc) == cfg.depth * 2 * (2 * cfg.lora_rank * cfg.width));
  NamedParams params;
  enc.collect_params(params);
  std::vector<std::string> lora_names;
  for (const auto& [name, p] : params)
    if (p->trainable) lora_names.push_back(name);
  set_trainable_policy(enc, TrainablePolicy::frozen);
  CHECK(trainable_count(enc) == 0);
  set_trainable_policy(enc, TrainablePolicy::full_ft);
  CHECK(trainable_count(enc) == count_params(params).total);
  for (const auto& [name, p] : params) {
    if (std::find(lora_names.begin(), lora_names.end(), name) != lora_names.end()) CHECK(p->trainable);
  }
}

TEST_CASE("a lora_only step changes only adapter tensors") {
  Rng rng(5);
  ImageEncoder enc(small_config(), rng);
  set_trainable_policy(enc, TrainablePolicy::lora_only);
  NamedParams params;
  enc.collect_params(params);
  std::vector<Tensor> before;
  for (const auto& [name, p] : params) before.push_back(p->value);
  Optimizer opt(OptimizerConfig{});
  for (int step = 0; step < 3; ++step) {
    zero_grads(params);
    ImageEncoder::Cache cache;
    const Tensor tokens = enc.forward_tokens(random_tensor({1, 16, 16}, rng), &cache);
    enc.backward_tokens(cache, tokens);
    opt.step(params);
  }
  bool adapter_moved = false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const bool is_adapter = params[i].first.find("adapter") != std::string::npos;
    if (is_adapter) {
      adapter_moved = adapter_moved || !(params[i].second->value == before[i]);
    } else {
      INFO(params[i].first);
      CHECK(params[i].second->value == before[i]);
    }
  }
  CHECK(adapter_moved);
}

TEST_CASE("adapter gradient through the whole encoder") {
  Rng rng(6);
  ImageEncoder enc(small_config(), rng);
  set_trainable_policy(enc, TrainablePolicy::lora_only);
  for (AdaptedAttention* layer : enc.attention_layers()) {
    layer->adapter_q.b.value = random_tensor(layer->adapter_q.b.value.shape(), rng, -0.3, 0.3);
    layer->adapter_v.b.value = random_tensor(layer->adapter_v.b.value.shape(), rng, -0.3, 0.3);
  }
  NamedParams params;
  enc.collect_params(params);
  const Tensor image = random_tensor({1, 16, 16}, rng, 0.0, 1.0);
  const Tensor w = random_tensor({4, 8}, rng);
  auto loss = [&] { return testing::dot(w, enc.forward_tokens(image)); };
  auto accumulate = [&] {
    zero_grads(params);
    ImageEncoder::Cache cache;
    (void)enc.forward_tokens(image, &cache);
    enc.backward_tokens(cache, w);
  };
  AdaptedAttention* first = enc.attention_layers().front();
  AdaptedAttention* last = enc.attention_layers().back();
  CHECK(testing::param_grad_error(first->adapter_q.a, loss, accumulate) < 1e-4);
  CHECK(testing::param_grad_error(first->adapter_v.b, loss, accumulate) < 1e-4);
  CHECK(testing::param_grad_error(last->adapter_q.b, loss, accumulate) < 1e-4);
}

TEST_CASE("images are encoded independently") {
  Rng rng(7);
  const ImageEncoder enc(small_config(), rng);
  const Tensor a = random_tensor({1, 16, 16}, rng), b = random_tensor({1, 16, 16}, rng);
  const Tensor ea = encode(a, enc).grid;
  (void)encode(b, enc);
  CHECK(encode(a, enc).grid == ea);
}

TEST_CASE("final layer norm standardizes every token") {
  Rng rng(8);
  ImageEncoder enc(small_config(), rng);
  enc.ln_out.gamma.value.fill(1.0);
  enc.ln_out.beta.value.fill(0.0);
  const Tensor t = enc.forward_tokens(random_tensor({1, 16, 16}, rng));
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < t.dim(1); ++j) mean += t.at(i, j) / t.dim(1);
    for (std::size_t j = 0; j < t.dim(1); ++j) var += (t.at(i, j) - mean) * (t.at(i, j) - mean) / t.dim(1);
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(var - 1.0) < 1e-6);
  }
}
