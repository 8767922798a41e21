#pragma once

// Tape-based reverse-mode differentiation over flat Eigen arrays.
//
// Every value on the tape is a dense array with an attached shape. Ops are
// free functions (see ops.hpp) that compute their forward value eagerly and
// register a backprop closure. Nodes are appended in evaluation order, so the
// tape is topologically sorted by construction and backward() is a single
// reverse sweep.

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "mixprune/error.hpp"

namespace mixprune {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <typename Scalar>
class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  std::size_t id = 0;

  const Array<Scalar>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->shape(id); }
  Index size() const { return value().size(); }
  Scalar item() const {
    if (size() != 1) fail(ErrorKind::shape, "item() on non-scalar " + shape_str(shape()));
    return value()(0);
  }
  const Array<Scalar>& grad() const { return tape->grad(id); }
  bool requires_grad() const { return tape->requires_grad(id); }
};

template <typename Scalar>
class Tape {
 public:
  using Values = Array<Scalar>;
  using Backprop = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// When set, rounding ops (quantizers, hard one-hot sampling) forward their
  /// straight-through surrogate instead of the discrete map. Used to verify
  /// the surrogate gradients against finite differences.
  bool surrogate_forward = false;

  Var<Scalar> variable(Values value, Shape shape) {
    return push(std::move(value), std::move(shape), true, {});
  }

  Var<Scalar> constant(Values value, Shape shape) {
    return push(std::move(value), std::move(shape), false, {});
  }

  Var<Scalar> scalar_constant(Scalar v) {
    Values a(1);
    a(0) = v;
    return constant(std::move(a), Shape{});
  }

  /// Records an op result. The backprop closure is dropped when no input
  /// requires a gradient.
  Var<Scalar> record(Values value, Shape shape, std::initializer_list<Var<Scalar>> inputs,
                     Backprop backprop) {
    bool needs = false;
    for (const auto& in : inputs) {
      check_owner(in);
      needs = needs || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), std::move(shape), needs, needs ? std::move(backprop) : Backprop{});
  }

  Var<Scalar> record(Values value, Shape shape, const std::vector<Var<Scalar>>& inputs,
                     Backprop backprop) {
    bool needs = false;
    for (const auto& in : inputs) {
      check_owner(in);
      needs = needs || nodes_[in.id].requires_grad;
    }
    return push(std::move(value), std::move(shape), needs, needs ? std::move(backprop) : Backprop{});
  }

  void backward(const Var<Scalar>& output) {
    check_owner(output);
    if (nodes_[output.id].value.size() != 1)
      fail(ErrorKind::contract,
           "backward() requires a scalar output, got " + shape_str(nodes_[output.id].shape));
    for (auto& node : nodes_) {
      if (node.requires_grad) node.grad.setZero(node.value.size());
    }
    if (!nodes_[output.id].requires_grad) return;
    nodes_[output.id].grad(0) = Scalar(1);
    for (std::size_t i = output.id + 1; i-- > 0;) {
      auto& node = nodes_[i];
      if (node.backprop && (node.grad != Scalar(0)).any()) node.backprop(*this, i);
    }
  }

  const Values& value(std::size_t id) const { return nodes_[id].value; }
  const Shape& shape(std::size_t id) const { return nodes_[id].shape; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  const Values& grad(std::size_t id) const {
    const auto& node = nodes_[id];
    if (node.grad.size() != node.value.size())
      fail(ErrorKind::contract, "gradient requested before backward() or for a constant");
    return node.grad;
  }

  /// Accumulation target for backprop closures. Returns nullptr for nodes
  /// that do not take part in differentiation.
  Values* grad_target(std::size_t id) {
    auto& node = nodes_[id];
    return node.requires_grad ? &node.grad : nullptr;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Values value;
    Values grad;
    Shape shape;
    bool requires_grad = false;
    Backprop backprop;
  };

  Var<Scalar> push(Values value, Shape shape, bool requires_grad, Backprop backprop) {
    if (value.size() != numel(shape))
      fail(ErrorKind::shape, "value size " + std::to_string(value.size()) +
                                 " does not match shape " + shape_str(shape));
    nodes_.push_back(Node{std::move(value), Values{}, std::move(shape), requires_grad,
                          std::move(backprop)});
    return Var<Scalar>{this, nodes_.size() - 1};
  }

  void check_owner(const Var<Scalar>& v) const {
    if (v.tape != this || v.id >= nodes_.size())
      fail(ErrorKind::contract, "variable does not belong to this tape");
  }

  std::vector<Node> nodes_;
};

/// Builds a scalar function on a fresh tape from a single input tensor.
template <typename Scalar>
using ScalarFunction = std::function<Var<Scalar>(Tape<Scalar>&, Var<Scalar>)>;

struct GradientCheckOptions {
  bool surrogate_forward = false;
};

/// Max over coordinates of |analytic - central| / (|analytic| + |central| + 1e-12).
///
/// The finite-difference oracle is evaluated in the same Scalar type unless
/// the caller passes `oracle`, which lets a single-precision analytic
/// gradient be checked against a double-precision difference quotient.
template <typename Scalar>
double check_gradient(const ScalarFunction<Scalar>& f, const Array<Scalar>& x, const Shape& shape,
                      double h, GradientCheckOptions options = {},
                      const std::function<double(const Eigen::ArrayXd&)>& oracle = {}) {
  Array<Scalar> analytic;
  {
    Tape<Scalar> tape;
    tape.surrogate_forward = options.surrogate_forward;
    auto in = tape.variable(x, shape);
    auto out = f(tape, in);
    tape.backward(out);
    analytic = in.grad();
  }

  auto evaluate = [&](const Eigen::ArrayXd& point) -> double {
    if (oracle) return oracle(point);
    Tape<Scalar> tape;
    tape.surrogate_forward = options.surrogate_forward;
    auto in = tape.constant(point.template cast<Scalar>(), shape);
    return static_cast<double>(f(tape, in).item());
  };

  Eigen::ArrayXd base = x.template cast<double>();
  double worst = 0.0;
  for (Index i = 0; i < base.size(); ++i) {
    Eigen::ArrayXd plus = base, minus = base;
    plus(i) += h;
    minus(i) -= h;
    const double central = (evaluate(plus) - evaluate(minus)) / (2.0 * h);
    const double a = static_cast<double>(analytic(i));
    const double err = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace mixprune
