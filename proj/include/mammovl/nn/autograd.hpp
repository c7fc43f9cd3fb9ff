#pragma once

#include "mammovl/nn/tensor.hpp"

#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

namespace mammovl::nn {

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad();
};

/// Handle to a node of the reverse-mode graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const std::vector<int>& shape() const { return node_->value.shape(); }
  int rows() const { return node_->value.rows(); }
  int cols() const { return node_->value.cols(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  /// Gradient; zeros if nothing has been accumulated yet.
  Tensor& grad() { return node_->ensure_grad(); }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  friend Var make_result(Tensor, std::vector<Var>, std::function<void(Node&)>);
  std::shared_ptr<Node> node_;
};

/// Builds an op result; records parents and the backward closure only when
/// gradient recording is enabled and some parent requires a gradient.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward);

/// Thread-local switch; recording is on by default.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Seeds each root with the given upstream gradient and propagates to all
/// reachable leaves. Gradients accumulate into existing leaf gradients.
void backward(std::span<const std::pair<Var, Tensor>> seeds);
void backward(const Var& scalar_root);

}  // namespace mammovl::nn
