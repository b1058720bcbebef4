#pragma once

// Reverse-mode differentiation over a dynamic graph: each Var owns a node that records
// its parents and a backward closure. backward() walks the graph in reverse
// topological order and finally flushes leaf gradients into their sinks
// (the gradient slots of a ParamStore).

#include <functional>
#include <memory>
#include <vector>

#include "max360iq/tensor.hpp"

namespace max360iq::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until something flows into it
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
  Tensor* sink = nullptr;
  bool requires_grad = false;

  Tensor& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t numel() const { return node_->value.numel(); }
  double item() const { return node_->value.item(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Tensor& grad() const { return node_->grad; }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

// Leaf without gradient.
Var constant(Tensor value);
// Leaf whose gradient is accumulated into `sink` after backward(). A null sink
// still tracks gradients (readable through Var::grad()).
Var leaf(Tensor value, Tensor* sink);

// Builds an op result. If gradient recording is off or no parent requires a
// gradient, the result is a constant and `backward` is dropped. The op result
// is checked for finiteness.
Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward,
                const char* op_name);

// Seeds d(root)/d(root) = 1 for a single-element root.
void backward(const Var& root);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

}  // namespace max360iq::ad
