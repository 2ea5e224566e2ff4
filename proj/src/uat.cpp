#include "memlab/uat.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "memlab/optim.hpp"

namespace memlab {

namespace {

Eigen::Index idx(std::size_t n) { return static_cast<Eigen::Index>(n); }

struct UatParams {
  Tensor weights;
  Tensor biases;
  Tensor alpha;
};

UatParams to_tensors(const UatModel& model, bool requires_grad) {
  return {Tensor::from_matrix(model.weights, requires_grad),
          Tensor::from_vector(model.biases, requires_grad),
          Tensor::from_matrix(model.alpha, requires_grad)};
}

UatModel from_tensors(const UatParams& p, Activation kind) {
  UatModel m;
  m.weights = p.weights.matrix();
  m.biases = Eigen::Map<const Eigen::VectorXd>(p.biases.values().data(), idx(p.biases.numel()));
  m.alpha = p.alpha.matrix();
  m.activation = kind;
  return m;
}

Tensor forward(const UatParams& p, const Tensor& inputs, Activation kind) {
  const Tensor hidden = activation(add_row(matmul(inputs, transpose(p.weights)), p.biases), kind);
  return matmul(hidden, transpose(p.alpha));
}

void check_samples(const SampleSet& samples, const UatModel& model) {
  if (samples.inputs.rows() != samples.targets.rows()) {
    throw ShapeError("sample set has " + std::to_string(samples.inputs.rows()) + " inputs but " +
                     std::to_string(samples.targets.rows()) + " targets");
  }
  if (static_cast<std::size_t>(samples.inputs.cols()) != model.input_dim() ||
      static_cast<std::size_t>(samples.targets.cols()) != model.output_dim()) {
    throw ShapeError("samples are " + std::to_string(samples.inputs.cols()) + " -> " +
                     std::to_string(samples.targets.cols()) + " but the model maps " +
                     std::to_string(model.input_dim()) + " -> " + std::to_string(model.output_dim()));
  }
}

}  // namespace

UatModel UatModel::random(std::size_t input_dim, std::size_t output_dim, std::size_t hidden,
                          std::uint64_t seed, Activation activation) {
  if (hidden == 0 || input_dim == 0 || output_dim == 0) {
    throw ShapeError("UAT model needs positive input, output and hidden extents");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  UatModel m;
  m.weights.resize(idx(hidden), idx(input_dim));
  m.biases.resize(idx(hidden));
  for (Eigen::Index j = 0; j < idx(hidden); ++j) {
    for (Eigen::Index i = 0; i < idx(input_dim); ++i) m.weights(j, i) = unit(rng);
    m.biases(j) = unit(rng);
  }
  m.alpha = RowMatrix::Zero(idx(output_dim), idx(hidden));
  m.activation = activation;
  return m;
}

void UatModel::validate() const {
  if (weights.rows() < 1 || weights.cols() < 1 || alpha.rows() < 1) {
    throw ShapeError("UAT model needs N >= 1 hidden units and positive input/output dims");
  }
  if (biases.size() != weights.rows() || alpha.cols() != weights.rows()) {
    throw ShapeError("UAT parameters disagree: W " + std::to_string(weights.rows()) + "x" +
                     std::to_string(weights.cols()) + ", theta " + std::to_string(biases.size()) +
                     ", alpha " + std::to_string(alpha.rows()) + "x" + std::to_string(alpha.cols()));
  }
}

void FitConfig::validate() const {
  if (!(step_size > 0.0)) throw ValueError("fit step size must be positive");
  if (max_iterations < 1) throw ValueError("fit needs at least one iteration");
  if (!(target_error > 0.0)) throw ValueError("target sup-error must be positive");
  if (checkpoint_every < 1) throw ValueError("checkpoint interval must be positive");
}

RowMatrix uniform_grid(std::size_t input_dim, std::size_t points_per_axis, double lo, double hi) {
  if (input_dim == 0 || points_per_axis < 2) throw ValueError("grid needs >= 1 axis and >= 2 points per axis");
  std::size_t total = 1;
  for (std::size_t i = 0; i < input_dim; ++i) total *= points_per_axis;
  RowMatrix grid(idx(total), idx(input_dim));
  const double step = (hi - lo) / static_cast<double>(points_per_axis - 1);
  for (std::size_t p = 0; p < total; ++p) {
    std::size_t rest = p;
    for (std::size_t axis = input_dim; axis-- > 0;) {
      grid(idx(p), idx(axis)) = lo + step * static_cast<double>(rest % points_per_axis);
      rest /= points_per_axis;
    }
  }
  return grid;
}

SampleSet sample_function(const RowMatrix& inputs,
                          const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f) {
  SampleSet s;
  s.inputs = inputs;
  for (Eigen::Index p = 0; p < inputs.rows(); ++p) {
    const Eigen::VectorXd y = f(inputs.row(p).transpose());
    if (p == 0) s.targets.resize(inputs.rows(), y.size());
    s.targets.row(p) = y.transpose();
  }
  return s;
}

RowMatrix uat_eval_batch(const UatModel& model, const RowMatrix& inputs) {
  model.validate();
  if (static_cast<std::size_t>(inputs.cols()) != model.input_dim()) {
    throw ShapeError("uat_eval: input has " + std::to_string(inputs.cols()) + " coordinates, model expects " +
                     std::to_string(model.input_dim()));
  }
  NoGradGuard no_grad;
  const UatParams p = to_tensors(model, false);
  return forward(p, Tensor::from_matrix(inputs), model.activation).matrix();
}

Eigen::VectorXd uat_eval(const UatModel& model, const Eigen::VectorXd& x) {
  RowMatrix row(1, x.size());
  row.row(0) = x.transpose();
  return uat_eval_batch(model, row).row(0).transpose();
}

double sup_error(const UatModel& model, const SampleSet& samples) {
  check_samples(samples, model);
  if (samples.size() == 0) throw ValueError("sup_error needs at least one sample");
  return (uat_eval_batch(model, samples.inputs) - samples.targets).cwiseAbs().maxCoeff();
}

double rms_error(const UatModel& model, const SampleSet& samples) {
  check_samples(samples, model);
  const RowMatrix diff = uat_eval_batch(model, samples.inputs) - samples.targets;
  return std::sqrt(diff.squaredNorm() / static_cast<double>(diff.size()));
}

FitResult uat_fit(const SampleSet& samples, std::size_t hidden, const FitConfig& config,
                  Activation activation) {
  const auto n = static_cast<std::size_t>(samples.inputs.cols());
  const auto m = static_cast<std::size_t>(samples.targets.cols());
  return uat_fit(samples, UatModel::random(n, m, hidden, config.seed, activation), config);
}

FitResult uat_fit(const SampleSet& samples, const UatModel& initial, const FitConfig& config) {
  config.validate();
  initial.validate();
  check_samples(samples, initial);
  if (samples.size() < 2) throw ValueError("uat_fit needs at least 2 samples");

  const Tensor inputs = Tensor::from_matrix(samples.inputs);
  const Tensor targets = Tensor::from_matrix(samples.targets);
  UatParams p = to_tensors(initial, true);
  std::vector<Tensor> params{p.weights, p.biases, p.alpha};
  AdamState adam = AdamState::for_params(params);

  FitResult result;
  result.model = initial;
  result.sup_error = sup_error(initial, samples);
  result.reached_target = result.sup_error < config.target_error;
  if (result.reached_target) return result;

  const double total = static_cast<double>(config.max_iterations);
  for (std::size_t it = 0; it < config.max_iterations; ++it) {
    double loss_value = 0.0;
    try {
      const Tensor diff = sub(forward(p, inputs, initial.activation), targets);
      const Tensor loss = mean(mul(diff, diff));
      loss_value = loss.item();
      backward(loss);
    } catch (const NonFiniteError& e) {
      throw FitError("uat_fit diverged at iteration " + std::to_string(it) + ": " + e.what());
    }
    const double lr = config.schedule == StepSchedule::cosine
                          ? config.step_size * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(it) / total))
                          : config.step_size;
    if (config.optimizer == FitOptimizer::adam) {
      adam_step(params, adam, AdamConfig{lr, 0.9, 0.999, 1e-8, 0.0});
    } else {
      for (auto& t : params) {
        auto values = t.mutable_values();
        const auto grad = t.grad();
        for (std::size_t i = 0; i < values.size(); ++i) values[i] -= lr * grad[i];
      }
    }
    for (auto& t : params) {
      for (double v : t.values()) {
        if (!std::isfinite(v)) throw FitError("uat_fit diverged at iteration " + std::to_string(it));
      }
    }
    reset_grads(params);
    result.iterations = it + 1;

    const bool last = it + 1 == config.max_iterations;
    if ((it + 1) % config.checkpoint_every == 0 || last) {
      result.loss_history.push_back(loss_value);
      const UatModel current = from_tensors(p, initial.activation);
      const double err = sup_error(current, samples);
      if (err < result.sup_error) {
        result.sup_error = err;
        result.model = current;
      }
      if (err < config.target_error) {
        result.reached_target = true;
        break;
      }
    }
  }
  return result;
}

UatModel widen(const UatModel& model, std::size_t hidden, std::uint64_t seed) {
  model.validate();
  const std::size_t old = model.hidden_units();
  if (hidden < old) throw ValueError("widen cannot drop hidden units");
  UatModel wide = UatModel::random(model.input_dim(), model.output_dim(), hidden, seed, model.activation);
  wide.weights.topRows(idx(old)) = model.weights;
  wide.biases.head(idx(old)) = model.biases;
  wide.alpha.leftCols(idx(old)) = model.alpha;
  return wide;
}

nlohmann::json to_json(const UatModel& model) {
  model.validate();
  const auto flat = [](const auto& m) {
    std::vector<double> v;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) v.push_back(m(r, c));
    return v;
  };
  return {{"n", model.input_dim()},
          {"m", model.output_dim()},
          {"N", model.hidden_units()},
          {"activation", std::string(to_string(model.activation))},
          {"W", flat(model.weights)},
          {"theta", flat(model.biases)},
          {"alpha", flat(model.alpha)}};
}

UatModel uat_model_from_json(const nlohmann::json& doc) {
  try {
    const auto n = doc.at("n").get<std::size_t>();
    const auto m = doc.at("m").get<std::size_t>();
    const auto hidden = doc.at("N").get<std::size_t>();
    const auto w = doc.at("W").get<std::vector<double>>();
    const auto theta = doc.at("theta").get<std::vector<double>>();
    const auto alpha = doc.at("alpha").get<std::vector<double>>();
    if (w.size() != hidden * n || theta.size() != hidden || alpha.size() != m * hidden) {
      throw ShapeError("UAT document arrays do not match n, m, N");
    }
    UatModel model;
    model.activation = activation_from_string(doc.at("activation").get<std::string>());
    model.weights = Eigen::Map<const RowMatrix>(w.data(), idx(hidden), idx(n));
    model.biases = Eigen::Map<const Eigen::VectorXd>(theta.data(), idx(hidden));
    model.alpha = Eigen::Map<const RowMatrix>(alpha.data(), idx(m), idx(hidden));
    model.validate();
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw ValueError(std::string("malformed UAT model document: ") + e.what());
  }
}

}  // namespace memlab
