#include "memlab/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <unordered_set>

namespace memlab {

namespace {

thread_local bool g_grad_enabled = true;

detail::NodePtr make_leaf(Shape shape, Buffer values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor data length " + std::to_string(values.size()) +
                     " does not match shape " + shape_string(shape));
  }
  for (std::size_t extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape));
  }
  detail::check_finite(values, "tensor");
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return node;
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

Buffer& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

void detail::check_finite(std::span<const double> values, const char* op) {
  // exponent bits all set means inf or nan; integer test so the scan vectorises
  constexpr std::uint64_t kExp = 0x7FF0000000000000ULL;
  bool bad = false;
  for (double v : values) bad |= (std::bit_cast<std::uint64_t>(v) & kExp) == kExp;
  if (!bad) return;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NonFiniteError(std::string("non-finite value in ") + op + " at flat index " +
                           std::to_string(i));
    }
  }
}

Tensor detail::make_result(Shape shape, Buffer values, const char* op,
                           std::vector<NodePtr> inputs, BackwardFn backward) {
  check_finite(values, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->op = op;
  bool tracked = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) tracked = tracked || in->requires_grad;
  }
  if (tracked) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

Tensor::Tensor() : node_(make_leaf(Shape{1}, Buffer{0.0}, false)) {}

Tensor::Tensor(Shape shape, const std::vector<double>& values, bool requires_grad)
    : node_(make_leaf(std::move(shape), Buffer(values.begin(), values.end()), requires_grad)) {}

Tensor Tensor::from_buffer(Shape shape, Buffer values, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_buffer(std::move(shape), Buffer(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_buffer(Shape{1}, Buffer{value}, requires_grad);
}

Tensor Tensor::from_matrix(const RowMatrix& m, bool requires_grad) {
  Buffer v(m.data(), m.data() + m.size());
  return from_buffer(Shape{static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                     std::move(v), requires_grad);
}

Tensor Tensor::from_vector(const Eigen::VectorXd& v, bool requires_grad) {
  return from_buffer(Shape{static_cast<std::size_t>(v.size())},
                     Buffer(v.data(), v.data() + v.size()), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->value.size(); }

std::size_t Tensor::rows() const {
  if (rank() == 1) return 1;
  if (rank() != 2) throw ShapeError("expected rank <= 2 tensor, got " + shape_string(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (rank() == 1) return shape()[0];
  if (rank() != 2) throw ShapeError("expected rank <= 2 tensor, got " + shape_string(shape()));
  return shape()[1];
}

std::span<const double> Tensor::values() const { return node_->value; }

std::span<double> Tensor::mutable_values() {
  if (!is_leaf()) throw TapeError(std::string("cannot mutate the output of op ") + node_->op);
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() needs a single-element tensor, got " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  return node_->value[row * cols() + col];
}

ConstMatrixMap Tensor::matrix() const {
  return ConstMatrixMap(node_->value.data(), static_cast<Eigen::Index>(rows()),
                        static_cast<Eigen::Index>(cols()));
}

bool Tensor::requires_grad() const { return node_->requires_grad; }
bool Tensor::is_leaf() const { return std::string_view(node_->op) == "leaf"; }
bool Tensor::has_grad() const { return node_->has_grad(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw TapeError("tensor has no gradient; run backward first");
  return node_->grad;
}

ConstMatrixMap Tensor::grad_matrix() const {
  if (!has_grad()) throw TapeError("tensor has no gradient; run backward first");
  return ConstMatrixMap(node_->grad.data(), static_cast<Eigen::Index>(rows()),
                        static_cast<Eigen::Index>(cols()));
}

void Tensor::zero_grad() { node_->grad.clear(); }

const char* Tensor::op_name() const { return node_->op; }

void reset_grads(std::span<Tensor> tensors) {
  for (auto& t : tensors) t.zero_grad();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_mode_enabled() { return g_grad_enabled; }

ComputationTape ComputationTape::record(const Tensor& root) {
  ComputationTape tape;
  std::unordered_set<detail::Node*> visited;
  // Iterative post-order DFS: a node is emitted after all of its inputs.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.nodes_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

std::vector<std::string> ComputationTape::op_names() const {
  std::vector<std::string> names;
  names.reserve(nodes_.size());
  for (const auto* n : nodes_) names.emplace_back(n->op);
  return names;
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw TapeError("backward needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  detail::Node& root = *loss.node();
  if (root.consumed) throw TapeError("backward already ran on this graph; rebuild it after reset");
  if (!root.requires_grad) throw TapeError("loss is not connected to any tracked tensor");

  const ComputationTape tape = ComputationTape::record(loss);
  for (const auto* node : tape.nodes()) {
    if (node->inputs.empty() && node->has_grad()) {
      throw TapeError("leaf gradients already populated; reset them before another backward");
    }
  }
  root.grad_buffer()[0] = 1.0;
  const auto& nodes = tape.nodes();
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward && node->has_grad()) node->backward(*node);
  }
  // Release the graph; intermediate grads are no longer needed.
  for (auto* node : nodes) {
    if (!node->inputs.empty()) {
      node->inputs.clear();
      node->backward = nullptr;
      node->grad.clear();
      node->grad.shrink_to_fit();
    }
  }
  root.consumed = true;
}

}  // namespace memlab
