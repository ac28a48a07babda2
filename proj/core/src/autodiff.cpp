#include "modelmix/autodiff.hpp"

#include <unordered_set>

namespace modelmix {

template <typename T>
T Var<T>::item() const {
  if (value().numel() != 1) {
    throw ContractViolation("Var::item: expected 1 element, got shape " + shape().str());
  }
  return value()[0];
}

template <typename T>
Var<T> make_node(Tensor4<T> value, const std::vector<Var<T>>& parents, const char* op, BackwardFn<T> fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  for (const auto& p : parents) {
    if (p.defined() && p.requires_grad()) {
      node->requires_grad = true;
      break;
    }
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.shared());
    node->backward = std::move(fn);
  }
  return Var<T>(std::move(node));
}

template <typename T>
void backward(const Var<T>& root) {
  if (root.value().numel() != 1) {
    throw ContractViolation("backward: root must hold one element, got " + root.shape().str());
  }
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->backward) continue;
    if (!node->grad.empty()) node->backward(*node);
    node->grad = Tensor4<T>();
  }
}

template <typename T>
Var<T> detach(const Var<T>& v) {
  return Var<T>::leaf(v.value(), false);
}

template class Var<float>;
template class Var<double>;
template Var<float> make_node(Tensor4<float>, const std::vector<Var<float>>&, const char*, BackwardFn<float>);
template Var<double> make_node(Tensor4<double>, const std::vector<Var<double>>&, const char*, BackwardFn<double>);
template void backward(const Var<float>&);
template void backward(const Var<double>&);
template Var<float> detach(const Var<float>&);
template Var<double> detach(const Var<double>&);

}  // namespace modelmix
