#include "bayesbeat/tape.hpp"

namespace bayesbeat {

template <class T>
auto BasicTape<T>::leaf(Tensor value) -> Var {
  if (consumed_) throw TapeError("tape already consumed by backward()");
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

template <class T>
auto BasicTape<T>::constant(Tensor value) -> Var {
  if (consumed_) throw TapeError("tape already consumed by backward()");
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

template <class T>
auto BasicTape<T>::record(Tensor value, std::initializer_list<std::size_t> inputs, BackwardFn fn) -> Var {
  if (consumed_) throw TapeError("tape already consumed by backward()");
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (auto id : inputs)
      if (nodes_.at(id).requires_grad) n.requires_grad = true;
    if (n.requires_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

template <class T>
auto BasicTape<T>::grad_buffer(std::size_t id) -> Tensor& {
  Node& n = nodes_.at(id);
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), T{0});
  return n.grad;
}

template <class T>
void BasicTape<T>::backward(Var loss) {
  if (loss.tape != this) throw TapeError("loss was recorded on a different tape");
  if (consumed_) throw TapeError("backward() called twice on the same tape");
  if (!grad_enabled_) throw TapeError("backward() on a tape recorded without gradients");
  if (nodes_.at(loss.id).value.size() != 1)
    throw TapeError("backward() needs a scalar loss, got shape " + shape_str(nodes_[loss.id].value.shape()));
  consumed_ = true;
  grad_buffer(loss.id)[0] = T{1};
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && !n.grad.empty()) n.backward(*this, i);
  }
}

template <class T>
auto BasicTape<T>::grad(Var v) const -> Tensor {
  const Node& n = nodes_.at(v.id);
  if (n.grad.empty()) return Tensor(n.value.shape(), T{0});
  return n.grad;
}

template class BasicTape<float>;
template class BasicTape<double>;

}  // namespace bayesbeat
