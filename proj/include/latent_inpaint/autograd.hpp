#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "latent_inpaint/ops.hpp"
#include "latent_inpaint/tensor.hpp"

namespace latent_inpaint::autograd {

namespace detail {

using latent_inpaint::detail::TensorImpl;

// Post-order over the tape reachable from `root`: every tensor appears after
// all tensors it was computed from.
inline std::vector<Tensor> topological_order(const Tensor& root) {
  std::vector<Tensor> order;
  std::unordered_set<TensorImpl*> visited;
  struct Frame {
    Tensor tensor;
    std::size_t next;
  };
  std::vector<Frame> stack{{root, 0}};
  visited.insert(root.impl());
  while (!stack.empty()) {
    auto& top = stack.back();
    const auto* node = top.tensor.impl()->grad_fn.get();
    if (node && top.next < node->inputs.size()) {
      const auto& child = node->inputs[top.next++];
      if (visited.insert(child.impl()).second) stack.push_back({child, 0});
      continue;
    }
    order.push_back(std::move(top.tensor));
    stack.pop_back();
  }
  return order;
}

inline std::vector<Tensor> run_reverse(const Tensor& output, const std::vector<TensorImpl*>& targets,
                                       bool create_graph) {
  if (output.numel() != 1) {
    throw AutogradError("gradient requested of a non-scalar tensor " + shape_str(output.shape()));
  }
  if (!output.requires_grad()) {
    throw AutogradError("output is detached from the tape");
  }
  auto order = topological_order(output);

  std::unordered_set<TensorImpl*> target_set(targets.begin(), targets.end());
  std::unordered_map<TensorImpl*, bool> relevant;
  for (const auto& t : order) {
    auto* impl = t.impl();
    bool r = target_set.count(impl) > 0;
    if (!r && impl->grad_fn) {
      for (const auto& in : impl->grad_fn->inputs) r = r || relevant[in.impl()];
    }
    relevant[impl] = r;
  }

  EnableGradGuard mode(create_graph);
  std::unordered_map<TensorImpl*, Tensor> grads;
  grads[output.impl()] = Tensor::full(output.shape(), 1.0);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Tensor& self = *it;
    TensorImpl* impl = self.impl();
    if (!relevant[impl] || !impl->grad_fn) continue;
    auto found = grads.find(impl);
    if (found == grads.end()) continue;
    const auto& node = *impl->grad_fn;
    if (create_graph && !node.supports_double_backward) {
      throw AutogradError("primitive '" + node.name + "' has no second-order rule");
    }
    std::vector<bool> needs(node.inputs.size());
    for (std::size_t i = 0; i < needs.size(); ++i) {
      needs[i] = node.inputs[i].requires_grad() && relevant[node.inputs[i].impl()];
    }
    auto input_grads = node.backward(self, found->second, needs);
    // Free the upstream gradient as soon as it has been consumed.
    if (!target_set.count(impl)) grads.erase(found);
    for (std::size_t i = 0; i < needs.size(); ++i) {
      if (!needs[i] || !input_grads[i].defined()) continue;
      auto* key = node.inputs[i].impl();
      auto slot = grads.find(key);
      if (slot == grads.end()) {
        grads.emplace(key, input_grads[i]);
      } else {
        slot->second = ops::add(slot->second, input_grads[i]);
      }
    }
  }

  std::vector<Tensor> result;
  result.reserve(targets.size());
  for (auto* t : targets) {
    auto found = grads.find(t);
    if (found != grads.end()) {
      result.push_back(found->second);
    } else if (t == output.impl()) {
      result.push_back(Tensor::full(output.shape(), 1.0));
    } else {
      result.push_back(Tensor::zeros(t->shape));
    }
  }
  return result;
}

}  // namespace detail

/// Gradients of the scalar `output` with respect to each of `inputs`.
/// With `create_graph` the returned tensors are themselves on the tape and
/// can be differentiated again. Inputs the output does not depend on get
/// zero gradients. Leaf `.grad()` fields are not touched.
inline std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                                bool create_graph = false) {
  std::vector<detail::TensorImpl*> targets;
  targets.reserve(inputs.size());
  for (const auto& t : inputs) targets.push_back(t.impl());
  return detail::run_reverse(output, targets, create_graph);
}

/// Accumulates dLoss/dLeaf into the grad field of every requires_grad leaf.
/// Repeated calls add up; callers zero gradients explicitly.
inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw AutogradError("backward on an undefined tensor");
  if (!loss.requires_grad()) throw AutogradError("loss is detached from the tape");
  std::vector<detail::TensorImpl*> leaves;
  for (const auto& t : detail::topological_order(loss)) {
    auto* impl = t.impl();
    if (!impl->grad_fn && impl->requires_grad) leaves.push_back(impl);
  }
  auto grads = detail::run_reverse(loss, leaves, false);
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    auto* leaf = leaves[i];
    if (!leaf->grad) {
      leaf->grad = std::make_shared<detail::TensorImpl>();
      leaf->grad->shape = leaf->shape;
      leaf->grad->data.assign(leaf->data.size(), 0.0);
    }
    auto g = grads[i].data();
    for (std::size_t k = 0; k < g.size(); ++k) leaf->grad->data[k] += g[k];
  }
}

/// Names of recorded primitives in the order the reverse pass visits them.
inline std::vector<std::string> reverse_visit_order(const Tensor& output) {
  std::vector<std::string> names;
  auto order = detail::topological_order(output);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (const auto* node = it->grad_fn()) names.push_back(node->name);
  }
  return names;
}

/// Per-sample L2 norm of d(sum f(x))/dx for x [N, ...], returned as [N] and
/// recorded on the tape so it can be differentiated with respect to f's
/// parameters. `f` must not couple samples.
template <class Fn>
Tensor input_gradient_norm(Fn&& f, const Tensor& x, double floor = 1e-12) {
  Tensor probe = x.requires_grad() ? x : x.detach().set_requires_grad(true);
  auto scores = f(probe);
  auto g = grad(ops::sum(scores), {probe}, true)[0];
  return ops::sqrt(ops::add_scalar(ops::sum_per_sample(ops::square(g)), floor));
}

}  // namespace latent_inpaint::autograd
