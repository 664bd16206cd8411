// SPDX-License-Identifier: Apache-2.0
//
// Parameter container and small layers with explicit forward/backward pairs.
// Forward passes are const; backward passes accumulate into Param::grad only
// when the parameter is trainable, so frozen gradients stay identically zero.
#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cellprompt/ops.hpp"
#include "cellprompt/rng.hpp"
#include "cellprompt/tensor.hpp"

namespace cellprompt {

struct Param {
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Param() = default;
  explicit Param(Tensor v, bool is_trainable = true)
      : value(std::move(v)), grad(Tensor::zeros_like(value)), trainable(is_trainable) {}

  void accumulate(const Tensor& g) {
    if (trainable) add_inplace(grad, g);
  }
  void zero_grad() { grad.fill(0.0); }
  std::size_t numel() const { return value.size(); }
};

using NamedParams = std::vector<std::pair<std::string, Param*>>;

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

void set_trainable(NamedParams& params, bool trainable);
void zero_grads(NamedParams& params);

Tensor normal_tensor(Shape shape, double stddev, Rng& rng);

/// y = x·Wᵀ + b with W: out×in.
class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true);

  struct Cache {
    Tensor x;
  };

  Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
  /// Returns dx (skipped, returning an empty tensor, when need_dx is false).
  Tensor backward(const Cache& cache, const Tensor& dy, bool need_dx = true);

  void collect_params(NamedParams& out, const std::string& prefix);

  std::size_t in_features() const { return weight.value.dim(1); }
  std::size_t out_features() const { return weight.value.dim(0); }

  Param weight;
  Param bias;
  bool has_bias = true;
};

class LayerNorm {
 public:
  static constexpr double kEps = 1e-9;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t d);

  Tensor forward(const Tensor& x, LayerNormCache* cache = nullptr) const;
  Tensor backward(const LayerNormCache& cache, const Tensor& dy);

  void collect_params(NamedParams& out, const std::string& prefix);

  Param gamma;
  Param beta;
};

/// Two linear layers with a ReLU in between.
class Mlp {
 public:
  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);

  struct Cache {
    Linear::Cache fc1;
    Tensor pre;  // pre-activation of the hidden layer
    Linear::Cache fc2;
  };

  Tensor forward(const Tensor& x, Cache* cache = nullptr) const;
  Tensor backward(const Cache& cache, const Tensor& dy, bool need_dx = true);

  void collect_params(NamedParams& out, const std::string& prefix);

  Linear fc1;
  Linear fc2;
};

}  // namespace cellprompt
