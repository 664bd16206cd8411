// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>

#include "cellprompt/tensor.hpp"

namespace cellprompt {

/// Central-difference gradient (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h for every coordinate.
/// Exceptions thrown by f propagate.
Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                              double h);

/// ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂); 0 when both vanish.
double relative_error(const Tensor& a, const Tensor& b);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace cellprompt
