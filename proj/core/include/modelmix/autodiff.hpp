#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "modelmix/tensor.hpp"

namespace modelmix {

template <typename T>
struct Node;

/// Propagates `self.grad` into the gradients of `self.parents`.
template <typename T>
using BackwardFn = std::function<void(Node<T>& self)>;

template <typename T>
struct Node {
  Tensor4<T> value;
  Tensor4<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn<T> backward;
  const char* op = "leaf";

  Tensor4<T>& ensure_grad() {
    if (grad.empty() || grad.shape() != value.shape()) grad = Tensor4<T>(value.shape());
    return grad;
  }
};

/// Handle to a value in the reverse-mode graph. Copies alias the same node,
/// which is how two models can share parameters.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var leaf(Tensor4<T> value, bool requires_grad = false) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = requires_grad;
    return Var(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor4<T>& value() const { return node_->value; }
  Tensor4<T>& mutable_value() { return node_->value; }
  const Shape4& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  /// Gradient, or zeros of the value's shape when nothing has been accumulated.
  Tensor4<T> grad() const { return has_grad() ? node_->grad : Tensor4<T>(shape()); }
  void zero_grad() { node_->grad = Tensor4<T>(); }

  /// Scalar value of a 1-element Var.
  T item() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates an interior node. Parents that do not require gradients are kept
/// out of the graph; if none require gradients the result is a constant.
template <typename T>
Var<T> make_node(Tensor4<T> value, const std::vector<Var<T>>& parents, const char* op, BackwardFn<T> fn);

/// Reverse sweep from a 1-element root, seeding d(root)/d(root) = 1. Interior
/// gradients are released as soon as they have been propagated; leaf
/// gradients accumulate across calls until zero_grad().
template <typename T>
void backward(const Var<T>& root);

/// Same value, cut from the graph.
template <typename T>
Var<T> detach(const Var<T>& v);

extern template class Var<float>;
extern template class Var<double>;
extern template Var<float> make_node(Tensor4<float>, const std::vector<Var<float>>&, const char*, BackwardFn<float>);
extern template Var<double> make_node(Tensor4<double>, const std::vector<Var<double>>&, const char*,
                                      BackwardFn<double>);
extern template void backward(const Var<float>&);
extern template void backward(const Var<double>&);
extern template Var<float> detach(const Var<float>&);
extern template Var<double> detach(const Var<double>&);

}  // namespace modelmix
