#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace knnmem {

using Real = double;
using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Dense row-major tensor of rank 0, 1 or 2.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = 0.0);
  Tensor(Shape shape, std::vector<Real> data);

  static Tensor vector(std::initializer_list<Real> values);
  static Tensor vector(std::vector<Real> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<Real> values);
  static Tensor scalar(Real value) { return Tensor(Shape{1}, std::vector<Real>{value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  /// Rows of a matrix; 1 for a vector.
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  /// Columns of a matrix; length of a vector.
  std::size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }
  Real& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  Real at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  std::span<Real> data() { return data_; }
  std::span<const Real> data() const { return data_; }
  std::span<Real> row(std::size_t r) { return std::span<Real>(data_).subspan(r * cols(), cols()); }
  std::span<const Real> row(std::size_t r) const {
    return std::span<const Real>(data_).subspan(r * cols(), cols());
  }
  const std::vector<Real>& values() const { return data_; }

  void fill(Real value);
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<Real> data_;
};

}  // namespace knnmem
