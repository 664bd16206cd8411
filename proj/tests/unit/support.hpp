// SPDX-License-Identifier: Apache-2.0
//
// Helpers shared by the unit tests: random tensors and a finite-difference
// check of an explicit backward pass.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include "cellprompt/grad_check.hpp"
#include "cellprompt/nn.hpp"
#include "cellprompt/rng.hpp"
#include "cellprompt/tensor.hpp"

namespace testing {

using cellprompt::Rng;
using cellprompt::Shape;
using cellprompt::Tensor;

inline constexpr double kStep = 1e-5;

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

inline Tensor random_mask(const Shape& shape, Rng& rng, double p = 0.5) {
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform() < p ? 1.0 : 0.0;
  return t;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Relative error between the analytic input gradient of a tensor-valued op
/// and the central-difference gradient of the projection <w, f(x)>.
inline double op_grad_error(const std::function<Tensor(const Tensor&)>& f,
                            const std::function<Tensor(const Tensor&, const Tensor&)>& backward, const Tensor& x,
                            Rng& rng) {
  const Tensor w = random_tensor(f(x).shape(), rng);
  const Tensor analytic = backward(x, w);
  const Tensor numeric =
      cellprompt::finite_difference_grad([&](const Tensor& p) { return dot(w, f(p)); }, x, kStep);
  return cellprompt::relative_error(analytic, numeric);
}

/// Relative error of a parameter gradient: `loss` runs a forward pass,
/// `accumulate` runs forward + backward and leaves the gradient in p.grad.
inline double param_grad_error(cellprompt::Param& p, const std::function<double()>& loss,
                               const std::function<void()>& accumulate) {
  p.zero_grad();
  accumulate();
  const Tensor analytic = p.grad;
  const Tensor saved = p.value;
  const Tensor numeric = cellprompt::finite_difference_grad(
      [&](const Tensor& v) {
        p.value = v;
        return loss();
      },
      saved, kStep);
  p.value = saved;
  return cellprompt::relative_error(analytic, numeric);
}

/// Fresh empty directory under the system temp path.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("cellprompt_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
