#include "dyntex/nn/autograd.hpp"

#include <unordered_set>
#include <utility>

#include "dyntex/error.hpp"

namespace dyntex::nn {

template <typename T>
Tape<T> Tape<T>::record(const Tensor<T>& root) {
  Tape tape;
  if (!root.defined()) return tape;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS; graphs get deep (one node per op per layer).
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.raw(), 0}};
  seen.insert(root.raw());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

template <typename T>
void backward(const Tensor<T>& loss, const Tape<T>& tape) {
  if (!loss.defined() || loss.numel() != 1)
    throw Error(Errc::NotScalar, "backward needs a scalar loss");
  if (!loss.requires_grad()) throw Error(Errc::DetachedGraph, "loss does not depend on any trainable tensor");
  if (tape.order().empty() || tape.order().back() != loss.raw())
    throw Error(Errc::DetachedGraph, "loss is not the root of the supplied tape");

  auto& seed = loss.raw()->ensure_grad();
  seed[0] += T(1);
  const auto& order = tape.order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->is_leaf()) continue;
    if (!node->grad.empty() && node->backward) node->backward(*node);
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw Error(Errc::NotScalar, "backward needs a scalar loss");
  backward(loss, Tape<T>::record(loss));
}

template class Tape<float>;
template class Tape<double>;
template void backward<float>(const Tensor<float>&);
template void backward<double>(const Tensor<double>&);
template void backward<float>(const Tensor<float>&, const Tape<float>&);
template void backward<double>(const Tensor<double>&, const Tape<double>&);

}  // namespace dyntex::nn
