// SPDX-License-Identifier: Apache-2.0
//
// Low-rank adaptation of attention projections.
//
// Column form h = W₀x + BAx is applied here in row-vector form: for a batch of
// row vectors x (n×d), h = x·W₀ᵀ + scale·(x·Aᵀ)·Bᵀ with A: r×d, B: d×r.
// Only the query and value projections carry an adapter; the key and output
// projections are plain frozen matrices.
#pragma once

#include <vector>

#include "cellprompt/attention.hpp"
#include "cellprompt/nn.hpp"

namespace cellprompt {

class LoraAdapter {
 public:
  static constexpr double kInitStd = 0.02;

  LoraAdapter() = default;
  /// A ~ N(0, 0.02²), B = 0. Throws ConfigError unless 1 <= rank <= d.
  LoraAdapter(std::size_t d, std::size_t rank, Rng& rng);

  std::size_t rank() const { return a.value.dim(0); }
  std::size_t width() const { return a.value.dim(1); }
  /// scale · B·A
  Tensor delta() const;

  void collect_params(NamedParams& out, const std::string& prefix);

  Param a;  // r×d
  Param b;  // d×r
  /// Multiplier on B·A; 1.0 applies the update literally.
  double update_scale = 1.0;
  double scale_factor() const { return update_scale; }
};

struct ProjectionCache {
  Tensor x;
  Tensor u;  // x·Aᵀ
};

Tensor adapted_project(const Tensor& x, const Param& base, const LoraAdapter& adapter,
                       ProjectionCache* cache = nullptr);
/// Accumulates gradients into the adapter (and the base, if trainable); returns dx.
Tensor adapted_project_backward(const ProjectionCache& cache, Param& base, LoraAdapter& adapter,
                                const Tensor& dh);

/// W₀ + scale·B·A
Tensor merge(const Param& base, const LoraAdapter& adapter);

class AdaptedAttention {
 public:
  AdaptedAttention() = default;
  AdaptedAttention(std::size_t d, std::size_t heads, std::size_t rank, Rng& rng);

  struct Cache {
    ProjectionCache q, v;
    Tensor x;
    MhaCache mha;
    Tensor attended;
  };

  Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
  Tensor backward(const Cache& cache, const Tensor& dy);

  void collect_params(NamedParams& out, const std::string& prefix);
  /// Freezes the base weights and makes only the two adapters trainable.
  void set_lora_only();

  std::size_t width() const { return wq.value.dim(0); }

  Param wq, wk, wv, wo;  // d×d, frozen base weights
  LoraAdapter adapter_q;
  LoraAdapter adapter_v;
  std::size_t heads = 1;
};

Tensor attention_forward(const Tensor& x, const AdaptedAttention& layer);

struct ParamCount {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::size_t total = 0;
};

ParamCount count_params(const NamedParams& params);
ParamCount count_adapter_params(std::vector<AdaptedAttention>& layers);

}  // namespace cellprompt
