#include "ecglp/tensor.hpp"

#include <unordered_set>

namespace ecglp {

namespace detail {

bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

bool& finite_check_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

template <typename Scalar>
std::vector<detail::Node<Scalar>*> topological_order(const Tensor<Scalar>& root) {
  using Node = detail::Node<Scalar>;
  std::vector<Node*> order;
  if (!root.defined() || !root.requires_grad()) return order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS; deep graphs must not exhaust the call stack.
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

template <typename Scalar>
void backward(const Tensor<Scalar>& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + std::to_string(loss.rows()) + "x" +
                     std::to_string(loss.cols()));
  }
  auto order = topological_order(loss);
  if (order.empty()) return;
  loss.node()->accumulate(Matrix<Scalar>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* node = *it;
    if (node->backward && node->grad.size() != 0) node->backward(*node);
  }
  for (auto* node : order) {
    if (node->backward) node->grad.resize(0, 0);
  }
}

template <typename Scalar>
std::vector<Matrix<Scalar>> gradients(const std::vector<Tensor<Scalar>>& params) {
  std::vector<Matrix<Scalar>> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    out.push_back(p.has_grad() ? p.grad() : Matrix<Scalar>::Zero(p.rows(), p.cols()));
  }
  return out;
}

template std::vector<detail::Node<float>*> topological_order(const Tensor<float>&);
template std::vector<detail::Node<double>*> topological_order(const Tensor<double>&);
template void backward(const Tensor<float>&);
template void backward(const Tensor<double>&);
template std::vector<Matrix<float>> gradients(const std::vector<Tensor<float>>&);
template std::vector<Matrix<double>> gradients(const std::vector<Tensor<double>>&);

}  // namespace ecglp
