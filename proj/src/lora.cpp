// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/lora.hpp"

#include <cmath>

#include "cellprompt/errors.hpp"

namespace cellprompt {

LoraAdapter::LoraAdapter(std::size_t d, std::size_t rank, Rng& rng) {
  if (rank == 0 || rank > d) {
    throw ConfigError("LoRA rank must satisfy 1 <= r <= d, got r=" + std::to_string(rank) +
                      ", d=" + std::to_string(d));
  }
  a = Param(normal_tensor({rank, d}, kInitStd, rng));
  b = Param(Tensor({d, rank}));
}

Tensor LoraAdapter::delta() const { return scale(matmul(b.value, a.value), scale_factor()); }

void LoraAdapter::collect_params(NamedParams& out, const std::string& prefix) {
  out.emplace_back(join_name(prefix, "A"), &a);
  out.emplace_back(join_name(prefix, "B"), &b);
}

namespace {
void check_projection(const Tensor& x, const Param& base, const LoraAdapter& adapter) {
  const std::size_t d = base.value.dim(0);
  if (base.value.ndim() != 2 || base.value.dim(1) != d) {
    throw DimensionError("adapted projection: base weight must be square, got " +
                         shape_str(base.value.shape()));
  }
  if (x.ndim() != 2 || x.dim(1) != d) {
    throw DimensionError("adapted projection: input " + shape_str(x.shape()) + " vs width " +
                         std::to_string(d));
  }
  if (adapter.width() != d || adapter.b.value.dim(0) != d) {
    throw DimensionError("adapted projection: adapter width " + std::to_string(adapter.width()) +
                         " vs base width " + std::to_string(d));
  }
}
}  // namespace

Tensor adapted_project(const Tensor& x, const Param& base, const LoraAdapter& adapter,
                       ProjectionCache* cache) {
  check_projection(x, base, adapter);
  Tensor h = matmul_nt(x, base.value);
  Tensor u = matmul_nt(x, adapter.a.value);
  const Tensor update = matmul_nt(u, adapter.b.value);
  axpy_inplace(h, adapter.scale_factor(), update);
  if (cache) {
    cache->x = x;
    cache->u = std::move(u);
  }
  return h;
}

Tensor adapted_project_backward(const ProjectionCache& cache, Param& base, LoraAdapter& adapter,
                                const Tensor& dh) {
  const double s = adapter.scale_factor();
  if (base.trainable) base.accumulate(matmul_tn(dh, cache.x));
  if (adapter.b.trainable) adapter.b.accumulate(scale(matmul_tn(dh, cache.u), s));
  const Tensor du = scale(matmul(dh, adapter.b.value), s);
  if (adapter.a.trainable) adapter.a.accumulate(matmul_tn(du, cache.x));
  Tensor dx = matmul(dh, base.value);
  add_inplace(dx, matmul(du, adapter.a.value));
  return dx;
}

Tensor merge(const Param& base, const LoraAdapter& adapter) {
  if (base.value.ndim() != 2 || base.value.dim(0) != adapter.b.value.dim(0) ||
      base.value.dim(1) != adapter.width()) {
    throw DimensionError("merge: base " + shape_str(base.value.shape()) + " vs adapter " +
                         shape_str(adapter.b.value.shape()) + "·" + shape_str(adapter.a.value.shape()));
  }
  return add(base.value, adapter.delta());
}

AdaptedAttention::AdaptedAttention(std::size_t d, std::size_t heads_, std::size_t rank, Rng& rng)
    : heads(heads_) {
  if (heads == 0 || d % heads) {
    throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const double std = std::sqrt(1.0 / static_cast<double>(d));
  wq = Param(normal_tensor({d, d}, std, rng), false);
  wk = Param(normal_tensor({d, d}, std, rng), false);
  wv = Param(normal_tensor({d, d}, std, rng), false);
  wo = Param(normal_tensor({d, d}, std, rng), false);
  adapter_q = LoraAdapter(d, rank, rng);
  adapter_v = LoraAdapter(d, rank, rng);
}

Tensor AdaptedAttention::forward(const Tensor& x, Cache* cache) const {
  if (x.ndim() != 2 || x.dim(1) != width()) {
    throw DimensionError("attention: input " + shape_str(x.shape()) + " vs width " +
                         std::to_string(width()));
  }
  const Tensor q = adapted_project(x, wq, adapter_q, cache ? &cache->q : nullptr);
  const Tensor k = matmul_nt(x, wk.value);
  const Tensor v = adapted_project(x, wv, adapter_v, cache ? &cache->v : nullptr);
  Tensor attended = multi_head_attention(q, k, v, heads, cache ? &cache->mha : nullptr);
  Tensor out = matmul_nt(attended, wo.value);
  if (cache) {
    cache->x = x;
    cache->attended = std::move(attended);
  }
  return out;
}

Tensor AdaptedAttention::backward(const Cache& cache, const Tensor& dy) {
  if (wo.trainable) wo.accumulate(matmul_tn(dy, cache.attended));
  const Tensor dattended = matmul(dy, wo.value);
  const MhaGrads g = multi_head_attention_backward(cache.mha, dattended);
  Tensor dx = adapted_project_backward(cache.q, wq, adapter_q, g.dq);
  if (wk.trainable) wk.accumulate(matmul_tn(g.dk, cache.x));
  add_inplace(dx, matmul(g.dk, wk.value));
  add_inplace(dx, adapted_project_backward(cache.v, wv, adapter_v, g.dv));
  return dx;
}

void AdaptedAttention::collect_params(NamedParams& out, const std::string& prefix) {
  out.emplace_back(join_name(prefix, "wq"), &wq);
  out.emplace_back(join_name(prefix, "wk"), &wk);
  out.emplace_back(join_name(prefix, "wv"), &wv);
  out.emplace_back(join_name(prefix, "wo"), &wo);
  adapter_q.collect_params(out, join_name(prefix, "adapter_q"));
  adapter_v.collect_params(out, join_name(prefix, "adapter_v"));
}

void AdaptedAttention::set_lora_only() {
  wq.trainable = wk.trainable = wv.trainable = wo.trainable = false;
  adapter_q.a.trainable = adapter_q.b.trainable = true;
  adapter_v.a.trainable = adapter_v.b.trainable = true;
}

Tensor attention_forward(const Tensor& x, const AdaptedAttention& layer) { return layer.forward(x); }

ParamCount count_params(const NamedParams& params) {
  ParamCount c;
  for (const auto& [name, p] : params) {
    (p->trainable ? c.trainable : c.frozen) += p->numel();
  }
  c.total = c.trainable + c.frozen;
  return c;
}

ParamCount count_adapter_params(std::vector<AdaptedAttention>& layers) {
  NamedParams all;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    layers[i].collect_params(all, "layer" + std::to_string(i));
  }
  return count_params(all);
}

}  // namespace cellprompt
