// Dense 2-D tensors with a dynamically recorded reverse-mode graph.
//
// Every tensor is a row-major Eigen matrix. Vectors are 1 x n rows and
// scalars are 1 x 1. The scalar type is a template parameter so the same
// networks run in float for training and in double for gradient checks.
#pragma once

#include <Eigen/Dense>

#include <array>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace ecglp {

using Index = Eigen::Index;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Raised when an operation produces or receives NaN/Inf, or a norm floor is hit.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised on incompatible shapes or invalid op arguments.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <typename Scalar>
struct Node {
  Matrix<Scalar> value;
  Matrix<Scalar> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::string op;  // "leaf" for inputs and parameters
  std::string name;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

bool& grad_mode_flag();
bool& finite_check_flag();

}  // namespace detail

/// True when new ops record their parents for backward().
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime (evaluation and finite differences).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename Scalar>
class Tensor {
 public:
  using Node = detail::Node<Scalar>;
  using Mat = Matrix<Scalar>;

  Tensor() = default;

  explicit Tensor(Mat value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
    node_->op = "leaf";
  }

  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor parameter(Mat value, std::string name = {}) {
    Tensor t(std::move(value), true);
    t.node_->name = std::move(name);
    return t;
  }

  static Tensor scalar(Scalar v) {
    Mat m(1, 1);
    m(0, 0) = v;
    return Tensor(std::move(m));
  }

  static Tensor zeros(Index rows, Index cols) { return Tensor(Mat::Zero(rows, cols)); }

  bool defined() const { return node_ != nullptr; }
  const Mat& value() const { return node_->value; }
  /// Direct write access. Only optimizers and loaders should touch values in place.
  Mat& mutable_value() { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() != 0; }
  void zero_grad() { node_->grad.setZero(node_->value.rows(), node_->value.cols()); }
  void clear_grad() { node_->grad.resize(0, 0); }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  Index size() const { return node_->value.size(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }
  bool requires_grad() const { return node_->requires_grad; }
  const std::string& name() const { return node_->name; }
  const std::string& op() const { return node_->op; }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on a tensor with " + std::to_string(size()) + " elements");
    return node_->value(0, 0);
  }
  Scalar operator()(Index r, Index c) const { return node_->value(r, c); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  /// Detached copy sharing no graph history.
  Tensor detach() const { return Tensor(node_->value); }

 private:
  std::shared_ptr<Node> node_;
};

/// Builds an op result. Parents and the backward closure are recorded only
/// when grad mode is on and at least one parent requires a gradient.
template <typename Scalar, typename Backward>
Tensor<Scalar> make_result(const char* op, Matrix<Scalar> value, std::vector<Tensor<Scalar>> parents,
                           Backward&& backward) {
  if (detail::finite_check_flag() && !value.allFinite()) {
    throw NumericError(std::string("non-finite value produced by ") + op);
  }
  auto node = std::make_shared<detail::Node<Scalar>>();
  node->value = std::move(value);
  node->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node_ptr());
      node->backward = std::forward<Backward>(backward);
    }
  }
  return Tensor<Scalar>(std::move(node));
}

/// Nodes reachable from `root` through requires_grad links, parents before children.
template <typename Scalar>
std::vector<detail::Node<Scalar>*> topological_order(const Tensor<Scalar>& root);

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// into every requires_grad leaf on the path; intermediate gradients are
/// released afterwards.
template <typename Scalar>
void backward(const Tensor<Scalar>& loss);

/// Gradients for `params`, zero-filled for parameters the last backward() never reached.
template <typename Scalar>
std::vector<Matrix<Scalar>> gradients(const std::vector<Tensor<Scalar>>& params);

}  // namespace ecglp
