// SPDX-License-Identifier: Apache-2.0
#include "cellprompt/optim.hpp"

#include <cmath>

namespace cellprompt {

void Optimizer::step(const NamedParams& params) {
  ++t_;
  if (cfg_.kind == OptimizerKind::sgd) {
    for (const auto& [name, p] : params) {
      if (p->trainable) axpy_inplace(p->value, -cfg_.lr, p->grad);
    }
    return;
  }
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& [name, p] : params) {
    if (!p->trainable) continue;
    auto [it, inserted] = state_.try_emplace(p);
    Moments& mo = it->second;
    if (inserted) {
      mo.m = Tensor::zeros_like(p->value);
      mo.v = Tensor::zeros_like(p->value);
    }
    double* w = p->value.ptr();
    const double* g = p->grad.ptr();
    double* m = mo.m.ptr();
    double* v = mo.v.ptr();
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

}  // namespace cellprompt
