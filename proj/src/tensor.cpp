#include "bayesbeat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace bayesbeat {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void require_shape(const Shape& actual, const Shape& expected, const std::string& what) {
  if (actual != expected)
    throw ShapeError(what + ": expected shape " + shape_str(expected) + ", got " + shape_str(actual));
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  data_.assign(shape_numel(shape_), fill);
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape_));
  if (shape_numel(shape_) != data_.size())
    throw ShapeError("tensor shape " + shape_str(shape_) + " holds " + std::to_string(shape_numel(shape_)) +
                     " values, got " + std::to_string(data_.size()));
}

template <class T>
std::size_t BasicTensor<T>::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
  return shape_[axis];
}

template <class T>
T BasicTensor<T>::item() const {
  if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

template <class T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size())
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return BasicTensor(std::move(shape), data_);
}

template <class T>
bool BasicTensor<T>::all_finite() const {
  for (auto v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

template <class T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template class BasicTensor<float>;
template class BasicTensor<double>;

}  // namespace bayesbeat
