#include "max360iq/autograd.hpp"

#include <unordered_set>

#include "max360iq/errors.hpp"

namespace max360iq::ad {

namespace {
thread_local bool g_grad_enabled = true;
}

Tensor& Node::grad_buffer() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var leaf(Tensor value, Tensor* sink) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->sink = sink;
  n->requires_grad = true;
  return Var(std::move(n));
}

Var make_result(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward,
                const char* op_name) {
  require_finite(value, op_name);
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (!g_grad_enabled) return Var(std::move(n));
  bool any = false;
  for (const Var& p : parents) any = any || p.requires_grad();
  if (!any) return Var(std::move(n));
  n->requires_grad = true;
  n->parents.reserve(parents.size());
  for (Var& p : parents) n->parents.push_back(p.shared());
  n->backward = std::move(backward);
  return Var(std::move(n));
}

void backward(const Var& root) {
  if (!root) throw PreconditionError("backward on empty Var");
  if (root.numel() != 1)
    throw PreconditionError("backward root must be a single element, got " +
                            shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (Node* n : order) {
    if (n->sink && !n->grad.empty()) {
      Tensor& s = *n->sink;
      if (s.shape() != n->value.shape())
        throw PreconditionError("gradient sink shape mismatch: " + shape_str(s.shape()) +
                                " vs " + shape_str(n->value.shape()));
      for (std::size_t i = 0; i < s.numel(); ++i) s[i] += n->grad[i];
    }
  }
}

}  // namespace max360iq::ad
