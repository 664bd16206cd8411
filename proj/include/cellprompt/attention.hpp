// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "cellprompt/nn.hpp"

namespace cellprompt {

/// Scaled dot-product attention split across heads:
/// per head h, softmax(Q_h K_hᵀ / sqrt(d/heads)) V_h, heads concatenated.
struct MhaCache {
  Tensor q, k, v;
  std::vector<Tensor> probs;  // one nq×nk matrix per head
  std::size_t heads = 1;
};

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            MhaCache* cache = nullptr);

struct MhaGrads {
  Tensor dq, dk, dv;
};
MhaGrads multi_head_attention_backward(const MhaCache& cache, const Tensor& dout);

/// Attention with learned projections of (possibly different) query, key and
/// value inputs into an internal width, and an output projection back to the
/// model width.
class ProjectedAttention {
 public:
  ProjectedAttention() = default;
  ProjectedAttention(std::size_t d, std::size_t internal, std::size_t heads, Rng& rng);

  struct Cache {
    Linear::Cache q, k, v, o;
    MhaCache mha;
  };

  Tensor forward(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, Cache* cache = nullptr) const;
  MhaGrads backward(const Cache& cache, const Tensor& dy);

  void collect_params(NamedParams& out, const std::string& prefix);

  Linear q_proj, k_proj, v_proj, out_proj;
  std::size_t heads = 1;
};

}  // namespace cellprompt
