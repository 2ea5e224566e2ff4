#include "memlab/optim.hpp"

#include <cmath>
#include <string>

namespace memlab {

AdamState AdamState::for_params(std::span<const Tensor> params) {
  AdamState state;
  for (const auto& p : params) {
    state.first_moment.push_back(Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(p.numel())));
    state.second_moment.push_back(Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(p.numel())));
  }
  return state;
}

double global_grad_norm(std::span<const Tensor> params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  return std::sqrt(sq);
}

double adam_step(std::span<Tensor> params, AdamState& state, const AdamConfig& config) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state tracks " + std::to_string(state.first_moment.size()) +
                     " tensors, got " + std::to_string(params.size()));
  }
  const double norm = global_grad_norm(params);
  if (!std::isfinite(norm)) throw NonFiniteError("adam_step: non-finite gradient");
  const double clip = (config.clip_norm > 0.0 && norm > config.clip_norm) ? config.clip_norm / norm : 1.0;

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_values();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (static_cast<std::size_t>(m.size()) != values.size()) {
      throw ShapeError("adam_step: state for tensor " + std::to_string(i) + " has wrong size");
    }
    Eigen::Map<Eigen::ArrayXd> x(values.data(), m.size());
    if (params[i].has_grad()) {
      const Eigen::Map<const Eigen::ArrayXd> g(params[i].grad().data(), m.size());
      m = config.beta1 * m + (1.0 - config.beta1) * clip * g;
      v = config.beta2 * v + (1.0 - config.beta2) * (clip * g).square();
    } else {
      m *= config.beta1;
      v *= config.beta2;
    }
    x -= config.learning_rate * (m / c1) / ((v / c2).sqrt() + config.epsilon);
  }
  return norm;
}

}  // namespace memlab
