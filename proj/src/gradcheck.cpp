#include "memlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace memlab {

namespace {

void check_eps(double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) {
    throw ValueError("grad_check eps must lie in (0, 1e-2], got " + std::to_string(eps));
  }
}

double scalar_of(const Tensor& t) {
  if (t.numel() != 1) throw ShapeError("grad_check needs a scalar function, got " + shape_string(t.shape()));
  return t.item();
}

}  // namespace

GradCheckResult grad_check_params(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                                  double eps) {
  check_eps(eps);
  reset_grads(params);
  {
    const Tensor loss = loss_fn();
    scalar_of(loss);
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), 0.0);  // parameter unused by the loss
    }
  }
  reset_grads(params);

  GradCheckResult result;
  NoGradGuard no_grad;
  std::size_t flat_index = 0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i, ++flat_index) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = scalar_of(loss_fn());
      values[i] = saved - eps;
      const double down = scalar_of(loss_fn());
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      if (!std::isfinite(numeric)) {
        throw NonFiniteError("grad_check: non-finite difference at coordinate " + std::to_string(flat_index));
      }
      const double a = analytic[pi][i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      if (err > result.max_relative_error) {
        result.max_relative_error = err;
        result.worst_index = flat_index;
      }
      ++result.coordinates;
    }
  }
  return result;
}

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                           double eps) {
  Tensor probe = Tensor::from_buffer(x.shape(), Buffer(x.values().begin(), x.values().end()), true);
  std::vector<Tensor> params{probe};
  return grad_check_params([&] { return f(probe); }, params, eps);
}

}  // namespace memlab
