// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/nn.hpp"

#include <cmath>

#include "cellprompt/errors.hpp"

namespace cellprompt {

void set_trainable(NamedParams& params, bool trainable) {
  for (auto& [name, p] : params) p->trainable = trainable;
}

void zero_grads(NamedParams& params) {
  for (auto& [name, p] : params) p->zero_grad();
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = stddev * rng.normal();
  return t;
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool bias)
    : weight(normal_tensor({out, in}, std::sqrt(1.0 / static_cast<double>(in)), rng)),
      bias(Tensor({out})),
      has_bias(bias) {}

Tensor Linear::forward(const Tensor& x, Cache* cache) const {
  if (x.ndim() != 2 || x.dim(1) != in_features()) {
    throw DimensionError("Linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.value.shape()));
  }
  Tensor y = matmul_nt(x, weight.value);
  if (has_bias) {
    const std::size_t n = y.dim(0), o = y.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < o; ++j) y[i * o + j] += bias.value[j];
    }
  }
  if (cache) cache->x = x;
  return y;
}

Tensor Linear::backward(const Cache& cache, const Tensor& dy, bool need_dx) {
  if (weight.trainable) weight.accumulate(matmul_tn(dy, cache.x));
  if (has_bias && bias.trainable) {
    Tensor db({dy.dim(1)});
    for (std::size_t i = 0; i < dy.dim(0); ++i) {
      for (std::size_t j = 0; j < dy.dim(1); ++j) db[j] += dy[i * dy.dim(1) + j];
    }
    bias.accumulate(db);
  }
  if (!need_dx) return Tensor();
  return matmul(dy, weight.value);
}

void Linear::collect_params(NamedParams& out, const std::string& prefix) {
  out.emplace_back(join_name(prefix, "weight"), &weight);
  if (has_bias) out.emplace_back(join_name(prefix, "bias"), &bias);
}

LayerNorm::LayerNorm(std::size_t d) : gamma(Tensor({d}, 1.0)), beta(Tensor({d})) {}

Tensor LayerNorm::forward(const Tensor& x, LayerNormCache* cache) const {
  return layer_norm(x, gamma.value, beta.value, kEps, cache);
}

Tensor LayerNorm::backward(const LayerNormCache& cache, const Tensor& dy) {
  LayerNormGrads g = layer_norm_backward(cache, gamma.value, dy);
  gamma.accumulate(g.dgamma);
  beta.accumulate(g.dbeta);
  return std::move(g.dx);
}

void LayerNorm::collect_params(NamedParams& out, const std::string& prefix) {
  out.emplace_back(join_name(prefix, "gamma"), &gamma);
  out.emplace_back(join_name(prefix, "beta"), &beta);
}

Mlp::Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng)
    : fc1(in, hidden, rng), fc2(hidden, out, rng) {
  // He scaling for the ReLU layer.
  fc1.weight.value = scale(fc1.weight.value, std::sqrt(2.0));
}

Tensor Mlp::forward(const Tensor& x, Cache* cache) const {
  Tensor pre = fc1.forward(x, cache ? &cache->fc1 : nullptr);
  Tensor h = relu(pre);
  if (cache) cache->pre = std::move(pre);
  return fc2.forward(h, cache ? &cache->fc2 : nullptr);
}

Tensor Mlp::backward(const Cache& cache, const Tensor& dy, bool need_dx) {
  Tensor dh = fc2.backward(cache.fc2, dy);
  return fc1.backward(cache.fc1, relu_backward(cache.pre, dh), need_dx);
}

void Mlp::collect_params(NamedParams& out, const std::string& prefix) {
  fc1.collect_params(out, join_name(prefix, "fc1"));
  fc2.collect_params(out, join_name(prefix, "fc2"));
}

}  // namespace cellprompt
