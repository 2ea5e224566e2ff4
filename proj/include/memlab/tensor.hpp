#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "memlab/errors.hpp"

namespace memlab {

using Shape = std::vector<std::size_t>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
// Storage is aligned to Eigen's packet size so vectorised reductions peel
// identically on every run (bit-reproducible results).
using Buffer = std::vector<double, Eigen::aligned_allocator<double>>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  Buffer value;
  Buffer grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  bool consumed = false;  // set once a backward pass has run through the node
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  BackwardFn backward;

  bool has_grad() const { return !grad.empty(); }
  // Zero-initialises the grad buffer on first use.
  Buffer& grad_buffer();
};

}  // namespace detail

// Dense row-major array of doubles. Copies share the underlying node, so a
// Tensor behaves like a handle; values are immutable after creation except
// through mutable_values() on leaves (optimizer updates).
class Tensor {
 public:
  // A single zero; placeholder for members assigned later.
  Tensor();
  Tensor(Shape shape, const std::vector<double>& values, bool requires_grad = false);

  static Tensor from_buffer(Shape shape, Buffer values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_matrix(const RowMatrix& m, bool requires_grad = false);
  static Tensor from_vector(const Eigen::VectorXd& v, bool requires_grad = false);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  // Rank 2 extents; a rank 1 tensor is viewed as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t row, std::size_t col) const;
  ConstMatrixMap matrix() const;

  bool requires_grad() const;
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  ConstMatrixMap grad_matrix() const;
  void zero_grad();

  const char* op_name() const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

// Drops the grad buffers of the given tensors so a new backward pass may run.
void reset_grads(std::span<Tensor> tensors);

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

// Topologically ordered record of the operations that produced a tensor.
// Inputs always precede the nodes that consume them; each node appears once.
class ComputationTape {
 public:
  static ComputationTape record(const Tensor& root);

  std::size_t size() const { return nodes_.size(); }
  std::vector<std::string> op_names() const;
  const std::vector<detail::Node*>& nodes() const { return nodes_; }

 private:
  std::vector<detail::Node*> nodes_;
};

// Reverse-mode sweep from a scalar loss. Leaf grads must be reset between
// passes; running twice on the same graph or onto populated leaves throws
// TapeError. The graph is released afterwards.
void backward(const Tensor& loss);

namespace detail {

// Builds an op result, validating finiteness and wiring the backward closure
// when any input is tracked and grad mode is on.
Tensor make_result(Shape shape, Buffer values, const char* op,
                   std::vector<NodePtr> inputs, BackwardFn backward);

void check_finite(std::span<const double> values, const char* op);

}  // namespace detail

}  // namespace memlab
