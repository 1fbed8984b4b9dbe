#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "memscan/tensor.hpp"

namespace memscan {

// Lightweight handle into a Tape. Valid only for the tape that produced it.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
// node list backwards is a topological traversal. Each op pushes one node
// whose backward closure scatters the node's gradient into its parents.
//
// A tape is single-threaded and call-local; concurrent forward passes use
// one tape per thread over shared immutable parameter values.
template <typename T>
class Tape {
 public:
  Var input(Tensor<T> value, bool needs_grad = false) {
    return push(std::move(value), {}, needs_grad, nullptr);
  }

  Var push(Tensor<T> value, std::vector<int> parents, bool needs_grad,
           std::function<void(Tape&, int)> back) {
    Node n;
    n.value = std::move(value);
    n.parents = std::move(parents);
    n.needs_grad = needs_grad;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor<T>& val(Var v) const { return nodes_[check(v)].value; }

  bool needs_grad(Var v) const { return nodes_[check(v)].needs_grad; }

  bool any_needs_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
      if (v.valid() && needs_grad(v)) return true;
    return false;
  }

  // Gradient of the last backward() root w.r.t. v; zeros if v was not reached.
  const Tensor<T>& grad(Var v) const {
    const Node& n = nodes_[check(v)];
    if (n.grad.empty()) {
      zero_like_ = Tensor<T>(n.value.shape());
      return zero_like_;
    }
    return n.grad;
  }

  // Gradient buffer for accumulation, allocated on first touch.
  Tensor<T>& grad_buf(Var v) {
    Node& n = nodes_[check(v)];
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  bool has_grad(Var v) const { return !nodes_[check(v)].grad.empty(); }

  // Reverse sweep from a scalar root. Gradients accumulate, so clear the tape
  // between independent backward passes.
  void backward(Var root) {
    Node& r = nodes_[check(root)];
    if (r.value.numel() != 1)
      throw ConfigError("Tape::backward: root must be scalar, got " + r.value.shape().str());
    grad_buf(root)[0] = T(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.back && !n.grad.empty() && n.needs_grad) n.back(*this, i);
    }
  }

  size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<int> parents;
    std::function<void(Tape&, int)> back;
    bool needs_grad = false;
  };

  int check(Var v) const {
    if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
      throw ConfigError("Tape: invalid Var");
    return v.id;
  }

  std::vector<Node> nodes_;
  mutable Tensor<T> zero_like_;
};

}  // namespace memscan
