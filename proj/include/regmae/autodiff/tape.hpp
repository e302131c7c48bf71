#pragma once

#include <functional>
#include <vector>

#include "regmae/autodiff/tensor.hpp"

namespace regmae::ad {

template <class S>
class Tape;

/// Handle to a value recorded on a tape.
template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<S>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape; }
  std::int64_t size() const { return value().size(); }
};

/// Define-by-run record of operations. Nodes are appended in evaluation
/// order, so reverse iteration is a valid topological order for backward.
template <class S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Tensor<S> v) { return push(std::move(v), false, {}, nullptr); }

  /// Leaf whose gradient is kept on the tape (inputs for attribution).
  Var<S> input(Tensor<S> v) { return push(std::move(v), true, {}, nullptr); }

  Var<S> param(Parameter<S>& p) {
    Node n;
    n.needs_grad = p.trainable;
    n.param = &p;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  /// Records an op result; it needs a gradient iff any parent does.
  Var<S> record(Tensor<S> value, std::initializer_list<std::size_t> parents, Backward backward) {
    bool needs = false;
    for (auto p : parents) needs = needs || nodes_[p].needs_grad;
    return push(std::move(value), needs, needs ? std::move(backward) : Backward{}, nullptr);
  }

  const Tensor<S>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.param ? n.param->value : n.value;
  }

  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  /// Mutable gradient buffer, zero-allocated on first use.
  Vec<S>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = Vec<S>::Zero(value(id).size());
    return n.grad;
  }

  /// Gradient of the last backward pass w.r.t. `v` (zeros if unreached).
  Tensor<S> grad_of(Var<S> v) {
    return Tensor<S>(value(v.id).shape, grad(v.id));
  }

  /// Reverse sweep from a scalar loss. Parameter gradients are added to
  /// Parameter::grad; other leaf gradients stay readable through grad_of().
  void backward(Var<S> loss) {
    require(loss.tape == this, ErrorKind::Validation, "loss belongs to another tape");
    require(value(loss.id).size() == 1, ErrorKind::Validation,
            "backward needs a scalar loss, got shape " + shape_str(value(loss.id).shape));
    for (auto& n : nodes_) n.grad.resize(0);
    grad(loss.id).setOnes();
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) {
        if (n.param->grad.size() != n.grad.size()) n.param->zero_grad();
        n.param->grad += n.grad;
      }
    }
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<S> value;
    Vec<S> grad;
    bool needs_grad = false;
    Backward backward;
    Parameter<S>* param = nullptr;
  };

  Var<S> push(Tensor<S> v, bool needs, Backward bw, Parameter<S>* p) {
    Node n;
    n.value = std::move(v);
    n.needs_grad = needs;
    n.backward = std::move(bw);
    n.param = p;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
};

}  // namespace regmae::ad
