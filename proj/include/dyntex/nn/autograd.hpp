#pragma once

#include <vector>

#include "dyntex/nn/tensor.hpp"

namespace dyntex::nn {

/// Nodes reachable from a root, in topological order (inputs before users).
template <typename T>
class Tape {
public:
  static Tape record(const Tensor<T>& root);

  const std::vector<Node<T>*>& order() const { return order_; }
  std::size_t size() const { return order_.size(); }

private:
  std::vector<Node<T>*> order_;
};

/// Seeds d(loss)/d(loss) = 1 and runs every backward rule once, in reverse
/// topological order. Leaf gradients accumulate across calls until
/// zero_grad(); interior gradients are released as soon as they are consumed.
template <typename T>
void backward(const Tensor<T>& loss);

template <typename T>
void backward(const Tensor<T>& loss, const Tape<T>& tape);

/// Gradient buffer of input `i` of `node`, or nullptr when that input does
/// not take gradients. For use inside backward rules.
template <typename T>
T* input_grad(Node<T>& node, std::size_t i) {
  auto& in = *node.inputs[i];
  if (!in.requires_grad) return nullptr;
  return in.ensure_grad().data();
}

}  // namespace dyntex::nn
