#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "docalign/nn/tensor.hpp"

namespace docalign::nn {

// Handle to a node on a Graph.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking them
// backwards is a valid topological order. Parameters can be bound by pointer:
// their values are read in place and gradients are accumulated straight into
// an external buffer.
template <class T>
class Graph {
 public:
  // Receives the graph and the gradient of the recorded output.
  using Backward = std::function<void(Graph&, const Tensor<T>&)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }
  Var variable(Tensor<T> value) { return push(std::move(value), true, {}); }

  // Binds an external tensor; gradients go to *grad (same shape) when non-null.
  Var bind(const Tensor<T>& value, Tensor<T>* grad) {
    Node n;
    n.external_value = &value;
    n.external_grad = grad;
    n.requires_grad = grad != nullptr;
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  // Records an op output. `backward` runs only if the output needs a gradient.
  Var record(Tensor<T> value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || (v.valid() && requires_grad(v));
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }
  Var record(Tensor<T> value, const std::vector<Var>& inputs, Backward backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || (v.valid() && requires_grad(v));
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{});
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external_value ? *n.external_value : n.value;
  }

  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  // Gradient buffer of v, zero-initialised on first access.
  Tensor<T>& grad(Var v) {
    Node& n = nodes_.at(v.id);
    if (n.external_grad) return *n.external_grad;
    if (n.grad.empty() && !value(v).empty()) n.grad = Tensor<T>(value(v).shape());
    if (n.grad.shape() != value(v).shape()) n.grad = Tensor<T>(value(v).shape());
    return n.grad;
  }

  // Gradient buffer of v if v takes part in differentiation, else null.
  Tensor<T>* grad_if(Var v) { return v.valid() && requires_grad(v) ? &grad(v) : nullptr; }

  bool has_grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external_grad != nullptr || !n.grad.empty();
  }

  // Seeds d(root)/d(root) = 1 (root must be a scalar) and back-propagates.
  void backward(Var root) {
    if (value(root).size() != 1) throw ShapeError("backward needs a scalar root, got " + value(root).shape_string());
    if (!requires_grad(root)) return;
    grad(root)[0] += T(1);
    run_backward(root);
  }

  // Back-propagates an arbitrary upstream gradient for a non-scalar root.
  void backward(Var root, const Tensor<T>& upstream) {
    if (!requires_grad(root)) return;
    Tensor<T>& g = grad(root);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] += upstream[k];
    run_backward(root);
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    const Tensor<T>* external_value = nullptr;
    Tensor<T>* external_grad = nullptr;
    bool requires_grad = false;
    Backward backward;
  };

  Var push(Tensor<T> value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  void run_backward(Var root) {
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.backward || !has_grad({id})) continue;
      // Move the closure out so it may freely touch other nodes.
      Backward fn = std::move(n.backward);
      fn(*this, n.grad);
      // Intermediate values and gradients are no longer needed.
      if (!n.external_grad) n.grad = Tensor<T>();
    }
  }

  std::deque<Node> nodes_;
};

}  // namespace docalign::nn
