#include "knnmem/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "knnmem/error.hpp"

namespace knnmem {

std::string to_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, Real fill) : shape_(std::move(shape)), data_(element_count(shape_), fill) {
  if (shape_.size() > 2) throw ShapeError("tensor rank above 2 is not supported: " + to_string(shape_));
}

Tensor::Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_.size() > 2) throw ShapeError("tensor rank above 2 is not supported: " + to_string(shape_));
  if (data_.size() != element_count(shape_)) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape_));
  }
}

Tensor Tensor::vector(std::initializer_list<Real> values) { return vector(std::vector<Real>(values)); }

Tensor Tensor::vector(std::vector<Real> values) {
  Shape shape{values.size()};
  return Tensor(std::move(shape), std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<Real> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

void Tensor::fill(Real value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
}

}  // namespace knnmem
