// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/prompt_generator.hpp"

#include <algorithm>
#include <cmath>

#include "cellprompt/errors.hpp"
#include "cellprompt/pnm.hpp"

namespace cellprompt {

Conv2dLayer::Conv2dLayer(std::size_t in, std::size_t out, std::size_t k, Rng& rng, double gain)
    : kernels(normal_tensor({out, in, k, k}, std::sqrt(gain / static_cast<double>(in * k * k)), rng)),
      bias(Tensor({out})),
      pad(static_cast<int>(k / 2)) {}

Tensor Conv2dLayer::forward(const Tensor& x, Cache* cache) const {
  Tensor y = add_channel_bias(conv2d(x, kernels.value, 1, pad), bias.value);
  if (cache) cache->x = x;
  return y;
}

Tensor Conv2dLayer::backward(const Cache& cache, const Tensor& dy, bool need_dx) {
  if (!kernels.trainable && !need_dx) return Tensor();
  if (bias.trainable) bias.accumulate(channel_bias_backward(dy));
  Conv2dGrads g = conv2d_backward(cache.x, kernels.value, 1, pad, dy, need_dx);
  kernels.accumulate(g.dkernels);
  return need_dx ? std::move(g.dinput) : Tensor();
}

void Conv2dLayer::collect_params(NamedParams& out, const std::string& prefix) {
  out.emplace_back(join_name(prefix, "kernels"), &kernels);
  out.emplace_back(join_name(prefix, "bias"), &bias);
}

namespace {

using DoubleConv = PromptGenerator::DoubleConv;
using DoubleConvCache = PromptGenerator::DoubleConvCache;

DoubleConv make_double_conv(std::size_t in, std::size_t out, Rng& rng) {
  return {Conv2dLayer(in, out, 3, rng), Conv2dLayer(out, out, 3, rng)};
}

Tensor double_conv_forward(const DoubleConv& b, const Tensor& x, DoubleConvCache* c) {
  Tensor pre1 = b.c1.forward(x, c ? &c->c1 : nullptr);
  Tensor h = relu(pre1);
  Tensor pre2 = b.c2.forward(h, c ? &c->c2 : nullptr);
  Tensor y = relu(pre2);
  if (c) {
    c->pre1 = std::move(pre1);
    c->pre2 = std::move(pre2);
  }
  return y;
}

Tensor double_conv_backward(DoubleConv& b, const DoubleConvCache& c, const Tensor& dy, bool need_dx) {
  const Tensor dh = b.c2.backward(c.c2, relu_backward(c.pre2, dy));
  return b.c1.backward(c.c1, relu_backward(c.pre1, dh), need_dx);
}

}  // namespace

PromptGenerator::PromptGenerator(const GeneratorConfig& cfg, Rng& rng) : cfg_(cfg) {
  const auto& w = cfg_.widths;
  std::size_t in = cfg_.in_channels;
  for (std::size_t l = 0; l < kLevels; ++l) {
    enc[l] = make_double_conv(in, w[l], rng);
    in = w[l];
  }
  for (std::size_t l = kLevels - 1; l-- > 0;) {
    dec[l] = make_double_conv(w[l + 1] + w[l], w[l], rng);
  }
  head = Conv2dLayer(w[0], 2, 1, rng, 1.0);
}

GeneratorOutput PromptGenerator::generate(const Tensor& image, Cache* cache) const {
  if (image.ndim() != 3 || image.dim(0) != cfg_.in_channels) {
    throw DimensionError("generator expects " + std::to_string(cfg_.in_channels) +
                         "×H×W input, got " + shape_str(image.shape()));
  }
  constexpr std::size_t kDiv = 1u << (kLevels - 1);
  if (image.dim(1) % kDiv || image.dim(2) % kDiv) {
    throw DimensionError("generator input " + shape_str(image.shape()) +
                         " spatial size must be divisible by " + std::to_string(kDiv));
  }
  std::array<Tensor, kLevels> skips;
  Tensor x = image;
  for (std::size_t l = 0; l < kLevels; ++l) {
    skips[l] = double_conv_forward(enc[l], x, cache ? &cache->enc[l] : nullptr);
    if (l + 1 < kLevels) {
      MaxPoolResult p = maxpool2(skips[l]);
      if (cache) {
        cache->pool_argmax[l] = std::move(p.argmax);
        cache->pool_shapes[l] = skips[l].shape();
      }
      x = std::move(p.out);
    }
  }
  Tensor y = std::move(skips[kLevels - 1]);
  for (std::size_t l = kLevels - 1; l-- > 0;) {
    y = double_conv_forward(dec[l], concat_channels(upsample_nearest2(y), skips[l]),
                            cache ? &cache->dec[l] : nullptr);
  }
  return {head.forward(y, cache ? &cache->head : nullptr)};
}

void PromptGenerator::backward(const Cache& cache, const Tensor& dlogits) {
  Tensor dy = head.backward(cache.head, dlogits);
  std::array<Tensor, kLevels> dskips;
  for (std::size_t l = 0; l + 1 < kLevels; ++l) {
    Tensor dcat = double_conv_backward(dec[l], cache.dec[l], dy, true);
    auto [dup, dskip] = split_channels(dcat, cfg_.widths[l + 1]);
    dskips[l] = std::move(dskip);
    dy = upsample_nearest2_backward(dup);
  }
  // dy now holds the gradient of the bottleneck output.
  for (std::size_t l = kLevels; l-- > 0;) {
    if (l + 1 < kLevels) {
      Tensor dpooled = std::move(dy);
      dy = maxpool2_backward(cache.pool_shapes[l], cache.pool_argmax[l], dpooled);
      add_inplace(dy, dskips[l]);
    }
    dy = double_conv_backward(enc[l], cache.enc[l], dy, l > 0);
  }
}

void PromptGenerator::collect_params(NamedParams& out, const std::string& prefix) {
  for (std::size_t l = 0; l < kLevels; ++l) {
    const std::string p = join_name(prefix, "enc" + std::to_string(l));
    enc[l].c1.collect_params(out, join_name(p, "conv1"));
    enc[l].c2.collect_params(out, join_name(p, "conv2"));
  }
  for (std::size_t l = 0; l + 1 < kLevels; ++l) {
    const std::string p = join_name(prefix, "dec" + std::to_string(l));
    dec[l].c1.collect_params(out, join_name(p, "conv1"));
    dec[l].c2.collect_params(out, join_name(p, "conv2"));
  }
  head.collect_params(out, join_name(prefix, "head"));
}

GeneratorOutput generate(const Tensor& image, const PromptGenerator& generator) {
  return generator.generate(image);
}

ProbabilityMap to_probability(const GeneratorOutput& out) {
  if (out.logits.ndim() != 3 || out.logits.dim(0) != 2) {
    throw DimensionError("generator logits must be 2×H×W, got " + shape_str(out.logits.shape()));
  }
  auto [pos, neg] = split_channels(out.logits, 1);
  const std::size_t h = out.logits.dim(1), w = out.logits.dim(2);
  return {sigmoid(pos).reshaped({h, w}), sigmoid(neg).reshaped({h, w})};
}

namespace {
constexpr double kLogClamp = 1e-12;

void check_binary(const Tensor& t, const char* what) {
  for (double v : t.data()) {
    if (v != 0.0 && v != 1.0) {
      throw ValidationError(std::string(what) + " must be binary, found " + std::to_string(v));
    }
  }
}
}  // namespace

double generator_loss(const GeneratorOutput& pred, const Tensor& target_pos, const Tensor& target_neg,
                      Tensor* dlogits) {
  const Tensor& m = pred.logits;
  if (m.ndim() != 3 || m.dim(0) != 2 || target_pos.shape() != Shape{m.dim(1), m.dim(2)} ||
      target_neg.shape() != target_pos.shape()) {
    throw DimensionError("generator_loss: logits " + shape_str(m.shape()) + " vs targets " +
                         shape_str(target_pos.shape()) + ", " + shape_str(target_neg.shape()));
  }
  check_binary(target_pos, "positive target");
  check_binary(target_neg, "negative target");
  const std::size_t hw = target_pos.size();
  const double n = static_cast<double>(2 * hw);
  if (dlogits) *dlogits = Tensor(m.shape());
  double total = 0.0;
  for (std::size_t ch = 0; ch < 2; ++ch) {
    const Tensor& t = ch == 0 ? target_pos : target_neg;
    for (std::size_t i = 0; i < hw; ++i) {
      const double s = sigmoid(m[ch * hw + i]);
      const double y = t[i];
      const double p1 = std::max(s, kLogClamp);
      const double p0 = std::max(1.0 - s, kLogClamp);
      total -= y * std::log(p1) + (1.0 - y) * std::log(p0);
      if (dlogits) {
        // d/dm of y·log(max(s,c)) + (1-y)·log(max(1-s,c)), with s' = s(1-s).
        const double g1 = s > kLogClamp ? y * (1.0 - s) : 0.0;
        const double g0 = 1.0 - s > kLogClamp ? -(1.0 - y) * s : 0.0;
        (*dlogits)[ch * hw + i] = -(g1 + g0) / n;
      }
    }
  }
  return total / n;
}

void export_probability_map(const ProbabilityMap& map, const std::string& pos_path,
                            const std::string& neg_path) {
  write_pgm16(pos_path, map.pos);
  write_pgm16(neg_path, map.neg);
}

}  // namespace cellprompt
