// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <unordered_map>

#include "cellprompt/nn.hpp"

namespace cellprompt {

enum class OptimizerKind { sgd, adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Updates trainable parameters from their accumulated gradients. Parameters
/// are visited in the order given, so a fixed parameter list gives bitwise
/// reproducible updates.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  void step(const NamedParams& params);
  long steps() const { return t_; }

 private:
  struct Moments {
    Tensor m;
    Tensor v;
  };
  OptimizerConfig cfg_;
  long t_ = 0;
  std::unordered_map<const Param*, Moments> state_;
};

}  // namespace cellprompt
