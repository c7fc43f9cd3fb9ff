#include "mammovl/nn/autograd.hpp"

#include "mammovl/errors.hpp"

#include <unordered_set>

namespace mammovl::nn {

namespace {
thread_local bool g_grad_enabled = true;
}

Tensor& Node::ensure_grad() {
  if (grad.empty() && !value.empty()) grad = Tensor::zeros_like(value);
  if (grad.shape() != value.shape()) grad = Tensor::zeros_like(value);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
  if (node_ && !node_->grad.empty()) node_->grad.fill(0.0f);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
  Var out(std::move(value), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  out.node_->requires_grad = true;
  out.node_->parents.reserve(parents.size());
  for (auto& p : parents) out.node_->parents.push_back(p.node());
  out.node_->backward_fn = std::move(backward);
  return out;
}

void backward(std::span<const std::pair<Var, Tensor>> seeds) {
  // Iterative post-order DFS gives a topological order of the graph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  for (const auto& [root, seed] : seeds) {
    if (!root.requires_grad()) continue;
    if (seed.shape() != root.value().shape()) {
      throw ShapeError("backward seed shape " + seed.shape_string() + " does not match root " +
                       root.value().shape_string());
    }
    Tensor& g = root.node()->ensure_grad();
    g.mat() += seed.mat();
    Node* start = root.node().get();
    if (visited.count(start)) continue;
    visited.insert(start);
    stack.emplace_back(start, 0);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node* p = node->parents[next++].get();
        if (p->requires_grad && !visited.count(p)) {
          visited.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) {
      node->backward_fn(*node);
    }
  }
  // Interior nodes are released with the graph; only leaves keep gradients.
  for (Node* node : order) {
    if (node->backward_fn) {
      node->grad = Tensor();
    }
  }
}

void backward(const Var& scalar_root) {
  if (scalar_root.value().numel() != 1) {
    throw ShapeError("backward() without a seed needs a scalar root");
  }
  std::pair<Var, Tensor> seed{scalar_root, Tensor(scalar_root.value().shape(), 1.0f)};
  backward(std::span<const std::pair<Var, Tensor>>(&seed, 1));
}

}  // namespace mammovl::nn
