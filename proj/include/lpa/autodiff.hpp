#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>

#include "lpa/tensor.hpp"

namespace lpa {

/// A trainable tensor plus its gradient. The gradient always has the value's shape.
template <typename T>
struct Parameter {
  Parameter(std::string id, Tensor<T> v) : name(std::move(id)), value(std::move(v)), grad(value.shape()) {}

  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad() { grad.fill(T(0)); }
};

template <typename T>
class Tape;

/// Handle to a node recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  /// Gradient accumulated so far (allocated as zeros on first access).
  Tensor<T>& grad() const { return tape->grad(id); }
};

/// Records primitive operations in execution order so that reverse-mode
/// accumulation can replay them backward, each exactly once.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf holding a constant (input data); its gradient is still tracked.
  Var<T> constant(Tensor<T> value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, {}});
    return {this, nodes_.size() - 1};
  }

  /// Leaf bound to a Parameter; backward writes straight into Parameter::grad.
  Var<T> parameter(Parameter<T>& p) {
    nodes_.push_back(Node{{}, {}, &p, {}});
    return {this, nodes_.size() - 1};
  }

  Var<T> record(Tensor<T> value, BackwardFn backward) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, std::move(backward)});
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.param ? n.param->value : n.value;
  }

  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (n.param) return n.param->grad;
    if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
    return n.grad;
  }

  bool has_grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.param != nullptr || !n.grad.empty();
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse-mode sweep from a scalar loss. Parameters bound on this tape get
  /// their gradients overwritten with d(loss)/d(value).
  void backward(Var<T> loss) {
    if (loss.tape != this) throw UsageError("backward: loss was not recorded on this tape");
    if (value(loss.id).size() != 1) throw UsageError("backward: loss must be a scalar, got shape " +
                                                      shape_string(value(loss.id).shape()));
    for (Node& n : nodes_)
      if (n.param) n.param->zero_grad();
    grad(loss.id).fill(T(1));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (!nodes_[i].backward || !has_grad(i)) continue;
      nodes_[i].backward(*this, i);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    Parameter<T>* param;
    BackwardFn backward;
  };

  // deque keeps node references stable while recording
  std::deque<Node> nodes_;
};

template <typename T>
void backward(Var<T> loss) {
  loss.tape->backward(loss);
}

}  // namespace lpa
