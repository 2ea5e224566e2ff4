#pragma once

#include <functional>
#include <span>

#include "memlab/tensor.hpp"

namespace memlab {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;  // flat index across all checked tensors
  std::size_t coordinates = 0;
};

// Compares reverse-mode gradients against central differences,
// |analytic - numeric| / max(1, |analytic|), maximised over coordinates.
// `f` must build a fresh graph on each call and return a scalar.
GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double eps = 1e-5);

// Same check over a set of parameters that a closure reads implicitly
// (e.g. every weight of a model). Parameters are perturbed in place and
// restored; their grads are reset on return.
GradCheckResult grad_check_params(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                                  double eps = 1e-5);

}  // namespace memlab
