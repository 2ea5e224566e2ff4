#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "memlab/ops.hpp"

namespace memlab {

// Finite sigmoidal sum G(x) = sum_j alpha_j * act(W_j . x + theta_j) with
// vector-valued output: alpha is output_dim x hidden.
struct UatModel {
  RowMatrix weights;       // hidden x input_dim
  Eigen::VectorXd biases;  // hidden
  RowMatrix alpha;         // output_dim x hidden
  Activation activation = Activation::sigmoid;

  std::size_t input_dim() const { return static_cast<std::size_t>(weights.cols()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(alpha.rows()); }
  std::size_t hidden_units() const { return static_cast<std::size_t>(weights.rows()); }

  // W and theta from seeded uniform(-1, 1); alpha zero, so G starts at 0.
  static UatModel random(std::size_t input_dim, std::size_t output_dim, std::size_t hidden,
                         std::uint64_t seed, Activation activation = Activation::sigmoid);

  // Throws ShapeError unless all parameter blocks agree on (n, m, N >= 1).
  void validate() const;
};

// Sampled target: row p of `inputs` maps to row p of `targets`.
struct SampleSet {
  RowMatrix inputs;   // P x n
  RowMatrix targets;  // P x m

  std::size_t size() const { return static_cast<std::size_t>(inputs.rows()); }
};

// Uniform grid of `points_per_axis` points per axis over [lo, hi]^n.
RowMatrix uniform_grid(std::size_t input_dim, std::size_t points_per_axis, double lo = -1.0,
                       double hi = 1.0);

SampleSet sample_function(const RowMatrix& inputs,
                          const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f);

Eigen::VectorXd uat_eval(const UatModel& model, const Eigen::VectorXd& x);
RowMatrix uat_eval_batch(const UatModel& model, const RowMatrix& inputs);

// max over samples of ||G(x) - f(x)||_inf, on the sample grid only.
double sup_error(const UatModel& model, const SampleSet& samples);
double rms_error(const UatModel& model, const SampleSet& samples);

enum class StepSchedule { cosine, constant };
enum class FitOptimizer { gradient_descent, adam };

struct FitConfig {
  double step_size = 0.2;
  StepSchedule schedule = StepSchedule::cosine;
  FitOptimizer optimizer = FitOptimizer::gradient_descent;
  std::size_t max_iterations = 100000;
  double target_error = 0.05;  // stop once the grid sup-error drops below it
  std::size_t checkpoint_every = 1000;
  std::uint64_t seed = 0;

  void validate() const;
};

struct FitResult {
  UatModel model;  // best checkpoint by sup-error
  double sup_error = 0.0;
  std::size_t iterations = 0;
  bool reached_target = false;
  std::vector<double> loss_history;  // mean squared error at each checkpoint
};

// Full-batch descent on the mean squared error. Reaching target_error is not
// guaranteed: density gives existence for some width, not for this one.
FitResult uat_fit(const SampleSet& samples, std::size_t hidden, const FitConfig& config,
                  Activation activation = Activation::sigmoid);
FitResult uat_fit(const SampleSet& samples, const UatModel& initial, const FitConfig& config);

// Pads to `hidden` units; new units get random W, theta and zero alpha, so the
// function is unchanged.
UatModel widen(const UatModel& model, std::size_t hidden, std::uint64_t seed);

nlohmann::json to_json(const UatModel& model);
UatModel uat_model_from_json(const nlohmann::json& doc);

}  // namespace memlab
