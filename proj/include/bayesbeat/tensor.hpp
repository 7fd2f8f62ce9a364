#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bayesbeat {

/// Raised when operand shapes are incompatible. The message names the
/// offending dimension.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array. Value type: copies are deep.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0});
  BasicTensor(Shape shape, std::vector<T> data);

  static BasicTensor scalar(T value) { return BasicTensor(Shape{1}, value); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  const std::vector<T>& values() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  /// The single element of a size-1 tensor.
  T item() const;

  BasicTensor reshaped(Shape shape) const;
  bool all_finite() const;
  void fill(T value);

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

extern template class BasicTensor<float>;
extern template class BasicTensor<double>;

/// Throws ShapeError unless `actual == expected`; `what` names the operand.
void require_shape(const Shape& actual, const Shape& expected, const std::string& what);

}  // namespace bayesbeat
