// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/attention.hpp"

#include <cmath>

#include "cellprompt/errors.hpp"

namespace cellprompt {

namespace {

Tensor head_slice(const Tensor& x, std::size_t h, std::size_t dh) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  Tensor s({n, dh});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dh; ++j) s[i * dh + j] = x[i * d + h * dh + j];
  }
  return s;
}

void put_head(Tensor& x, const Tensor& s, std::size_t h, std::size_t dh) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dh; ++j) x[i * d + h * dh + j] = s[i * dh + j];
  }
}

}  // namespace

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            MhaCache* cache) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2 || q.dim(1) != k.dim(1) ||
      k.shape() != v.shape()) {
    throw DimensionError("attention: incompatible q " + shape_str(q.shape()) + ", k " +
                         shape_str(k.shape()) + ", v " + shape_str(v.shape()));
  }
  const std::size_t d = q.dim(1);
  if (heads == 0 || d % heads) {
    throw ConfigError("attention: width " + std::to_string(d) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Tensor out({q.dim(0), d});
  if (cache) {
    cache->q = q;
    cache->k = k;
    cache->v = v;
    cache->heads = heads;
    cache->probs.clear();
  }
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = head_slice(q, h, dh);
    const Tensor kh = head_slice(k, h, dh);
    const Tensor vh = head_slice(v, h, dh);
    Tensor p = softmax_rows(scale(matmul_nt(qh, kh), inv));
    put_head(out, matmul(p, vh), h, dh);
    if (cache) cache->probs.push_back(std::move(p));
  }
  return out;
}

MhaGrads multi_head_attention_backward(const MhaCache& c, const Tensor& dout) {
  const std::size_t d = c.q.dim(1);
  const std::size_t dh = d / c.heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  MhaGrads g{Tensor(c.q.shape()), Tensor(c.k.shape()), Tensor(c.v.shape())};
  for (std::size_t h = 0; h < c.heads; ++h) {
    const Tensor qh = head_slice(c.q, h, dh);
    const Tensor kh = head_slice(c.k, h, dh);
    const Tensor vh = head_slice(c.v, h, dh);
    const Tensor doh = head_slice(dout, h, dh);
    const Tensor& p = c.probs[h];
    const Tensor dp = matmul_nt(doh, vh);
    put_head(g.dv, matmul_tn(p, doh), h, dh);
    const Tensor ds = scale(softmax_rows_backward(p, dp), inv);
    put_head(g.dq, matmul(ds, kh), h, dh);
    put_head(g.dk, matmul_tn(ds, qh), h, dh);
  }
  return g;
}

ProjectedAttention::ProjectedAttention(std::size_t d, std::size_t internal, std::size_t heads_,
                                       Rng& rng)
    : q_proj(d, internal, rng), k_proj(d, internal, rng), v_proj(d, internal, rng),
      out_proj(internal, d, rng), heads(heads_) {
  if (heads == 0 || internal % heads) {
    throw ConfigError("attention: internal width " + std::to_string(internal) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
}

Tensor ProjectedAttention::forward(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in,
                                   Cache* cache) const {
  const Tensor q = q_proj.forward(q_in, cache ? &cache->q : nullptr);
  const Tensor k = k_proj.forward(k_in, cache ? &cache->k : nullptr);
  const Tensor v = v_proj.forward(v_in, cache ? &cache->v : nullptr);
  const Tensor a = multi_head_attention(q, k, v, heads, cache ? &cache->mha : nullptr);
  return out_proj.forward(a, cache ? &cache->o : nullptr);
}

MhaGrads ProjectedAttention::backward(const Cache& cache, const Tensor& dy) {
  const Tensor da = out_proj.backward(cache.o, dy);
  const MhaGrads g = multi_head_attention_backward(cache.mha, da);
  return {q_proj.backward(cache.q, g.dq), k_proj.backward(cache.k, g.dk),
          v_proj.backward(cache.v, g.dv)};
}

void ProjectedAttention::collect_params(NamedParams& out, const std::string& prefix) {
  q_proj.collect_params(out, join_name(prefix, "q_proj"));
  k_proj.collect_params(out, join_name(prefix, "k_proj"));
  v_proj.collect_params(out, join_name(prefix, "v_proj"));
  out_proj.collect_params(out, join_name(prefix, "out_proj"));
}

}  // namespace cellprompt
