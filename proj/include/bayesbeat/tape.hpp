#pragma once

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <vector>

#include "bayesbeat/tensor.hpp"

namespace bayesbeat {

/// Raised on misuse of a gradient tape (second backward, non-scalar loss, ...).
class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <class T>
class BasicTape;

/// Handle to a value recorded on a tape.
template <class T>
struct BasicVar {
  BasicTape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// Ordered record of executed primitives. Nodes are appended in execution
/// order; backward() replays them in reverse, accumulating gradients into
/// every node that transitively depends on a leaf.
///
/// A tape is single-threaded. The kernels a primitive calls may themselves
/// run in parallel.
template <class T>
class BasicTape {
 public:
  using Tensor = BasicTensor<T>;
  using Var = BasicVar<T>;
  /// Called with the tape and the id of the node whose gradient is ready.
  using BackwardFn = std::function<void(BasicTape&, std::size_t)>;

  /// With grad disabled no backward closures are kept (inference).
  explicit BasicTape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  BasicTape(const BasicTape&) = delete;
  BasicTape& operator=(const BasicTape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  /// Differentiable input (a parameter).
  Var leaf(Tensor value);
  /// Non-differentiable input.
  Var constant(Tensor value);
  /// Appends the result of a primitive. `fn` is kept only if some input
  /// requires a gradient.
  Var record(Tensor value, std::initializer_list<std::size_t> inputs, BackwardFn fn);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id); }

  /// Gradient buffer of a node, zero-initialised on first access.
  Tensor& grad_buffer(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }

  /// Reverse sweep from a scalar loss. A tape can be swept once.
  void backward(Var loss);
  bool consumed() const { return consumed_; }

  /// d loss / d v after backward(); exact zeros if `v` did not influence the loss.
  Tensor grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
  };

  std::vector<Node> nodes_;
  bool grad_enabled_ = true;
  bool consumed_ = false;
};

using Tape = BasicTape<float>;
using Var = BasicVar<float>;

extern template class BasicTape<float>;
extern template class BasicTape<double>;

}  // namespace bayesbeat
