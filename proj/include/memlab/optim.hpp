#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <vector>

#include "memlab/tensor.hpp"

namespace memlab {

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 1.0;  // global L2 norm; <= 0 disables clipping
};

struct AdamState {
  std::vector<Eigen::ArrayXd> first_moment;
  std::vector<Eigen::ArrayXd> second_moment;
  std::int64_t step = 0;

  // Zero moments sized to match `params`.
  static AdamState for_params(std::span<const Tensor> params);
};

double global_grad_norm(std::span<const Tensor> params);

// One bias-corrected Adam update using each parameter's grad. Gradients are
// rescaled to `clip_norm` when their global norm exceeds it. Parameters
// without a grad are treated as having a zero gradient. Returns the
// pre-clip global norm.
double adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& config);

}  // namespace memlab
