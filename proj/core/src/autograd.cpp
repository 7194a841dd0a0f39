// SPDX-License-Identifier: Apache-2.0
//
// Reverse sweep over the recorded graph. Nodes are ordered by an iterative
// post-order DFS from the root; walking that list backwards visits every
// consumer before its producers, so each node fires exactly once with its
// fully accumulated output gradient.

#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "voxformer/tensor.hpp"

namespace voxformer {

namespace {

std::vector<std::shared_ptr<Node>> topo_order(const std::shared_ptr<Node>& root) {
  std::vector<std::shared_ptr<Node>> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const Tensor& in = node->inputs[next++];
      if (!in.defined()) continue;
      const auto& child = in.grad_fn();
      if (child != nullptr && seen.insert(child.get()).second) {
        if (child->consumed) {
          throw GraphError("graph segment '" + child->op +
                           "' was already freed by a previous backward()");
        }
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace

void Tensor::backward() const {
  if (!defined()) throw GraphError("backward() on an undefined tensor");
  if (numel() != 1) {
    throw GraphError("backward() requires a scalar root, got shape " + shape().to_string());
  }
  if (!requires_grad()) throw GraphError("backward() on a tensor that is detached from any graph");

  if (is_leaf()) {
    detail::accumulate(impl_->grad, Tensor::ones(shape(), dtype()));
    return;
  }
  const auto& root = impl_->grad_fn;
  if (root->consumed) throw GraphError("backward() called twice on the same graph");

  const auto order = topo_order(root);
  std::unordered_map<Node*, std::shared_ptr<Buffer>> pending;
  pending[root.get()] = std::make_shared<Buffer>(*Tensor::ones(shape(), dtype()).impl()->data);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = it->get();
    auto found = pending.find(node);
    if (found != pending.end() && found->second) {
      const DType dt = std::holds_alternative<std::vector<float>>(*found->second) ? DType::f32 : DType::f64;
      Tensor gout = Tensor::wrap(node->output_shape, dt, found->second);
      std::vector<Tensor> gins;
      {
        NoGradGuard no_grad;
        gins = node->backward(gout);
      }
      for (std::size_t i = 0; i < node->inputs.size() && i < gins.size(); ++i) {
        const Tensor& in = node->inputs[i];
        const Tensor& g = gins[i];
        if (!in.defined() || !g.defined() || !in.requires_grad()) continue;
        if (g.numel() != in.numel()) {
          throw GraphError("op '" + node->op + "' produced a gradient of " +
                           std::to_string(g.numel()) + " elements for an input of shape " +
                           in.shape().to_string());
        }
        if (in.is_leaf()) {
          detail::accumulate(in.impl()->grad, g);
        } else {
          detail::accumulate(pending[in.grad_fn().get()], g);
        }
      }
      pending.erase(node);
    }
    node->backward = nullptr;
    node->inputs.clear();
    node->consumed = true;
  }
}

}  // namespace voxformer
