#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>

#include "nmrwm/autodiff/params.hpp"
#include "nmrwm/autodiff/tensor.hpp"

namespace nmrwm::ad {

enum class Mode { train, eval };

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;

  const Tensor<Scalar>& value() const { return tape_->value_of(id_); }
  const Shape& shape() const { return value().shape(); }
  Index dim(Index i) const { return value().dim(i); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  Tape<Scalar>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape<Scalar>;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Wengert list for reverse-mode differentiation. Nodes are appended in evaluation
/// order, which is a topological order; backward walks them in reverse once.
template <typename Scalar>
class Tape {
 public:
  using TensorT = Tensor<Scalar>;
  using VarT = Var<Scalar>;
  using Backward = std::function<void(const TensorT& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// With `check_finite`, every recorded value is checked and a NumericError raised on NaN/Inf.
  void set_check_finite(bool on) { check_finite_ = on; }

  VarT constant(TensorT value) { return push(std::move(value), false, {}, nullptr); }
  VarT leaf(TensorT value) { return push(std::move(value), true, {}, nullptr); }

  /// References the parameter value without copying. The parameter must outlive the tape.
  VarT parameter(const Parameter<Scalar>& p) {
    Node n;
    n.external = &p.value;
    n.requires_grad = p.trainable;
    n.param = &p;
    nodes_.push_back(std::move(n));
    return VarT(this, nodes_.size() - 1);
  }

  VarT record(TensorT value, bool requires_grad, Backward backward) {
    return push(std::move(value), requires_grad, std::move(backward), nullptr);
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  const TensorT& value_of(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  /// Adds `g` into the gradient of `v`. Called from backward closures.
  void accumulate(const VarT& v, const TensorT& g) {
    Node& n = nodes_[v.id()];
    if (!n.requires_grad) return;
    if (n.grad.empty())
      n.grad = g;
    else
      n.grad.array() += g.array();
  }

  /// Gradient of the last backward pass with respect to `v` (zeros if unreached).
  TensorT grad(const VarT& v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.empty() ? TensorT(value_of(v.id()).shape()) : n.grad;
  }

  /// Runs reverse accumulation from a scalar. A tape can be consumed only once.
  void backward(const VarT& loss) {
    if (consumed_) throw UsageError("tape already consumed by a backward pass");
    if (loss.value().size() != 1) throw UsageError("backward requires a scalar loss, got " + shape_string(loss.shape()));
    consumed_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad = TensorT::filled(loss.shape(), Scalar(1));
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.grad.empty() || !n.backward) continue;
      n.backward(n.grad);
    }
  }

  /// Adds parameter gradients into the matching entries of `store` (by name).
  void collect_gradients(ParamStore<Scalar>& store) const {
    for (const Node& n : nodes_) {
      if (n.param == nullptr || n.grad.empty()) continue;
      store.at(n.param->name).grad.array() += n.grad.array();
    }
  }

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Node {
    TensorT value;
    const TensorT* external = nullptr;
    TensorT grad;
    bool requires_grad = false;
    Backward backward;
    const Parameter<Scalar>* param = nullptr;
  };

  VarT push(TensorT value, bool requires_grad, Backward backward, const Parameter<Scalar>* param) {
    if (check_finite_ && !value.all_finite())
      throw NumericError("non-finite value recorded at tape node " + std::to_string(nodes_.size()));
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    n.param = param;
    nodes_.push_back(std::move(n));
    return VarT(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  bool consumed_ = false;
  bool check_finite_ = false;
};

}  // namespace nmrwm::ad
