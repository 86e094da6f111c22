#pragma once

#include <cstddef>
#include <vector>

#include "meshseq/common.hpp"

namespace meshseq {

// Dense row-major 64-bit float array. Rank is usually 1 or 2.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // 2-D accessors
  std::size_t rows() const;
  std::size_t cols() const;
  double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double* row(std::size_t r) { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const { return data_.data() + r * cols_; }

  double scalar_value() const;
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const;

  void fill(double v);
  void reshape(std::vector<std::size_t> shape);

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
  std::size_t cols_ = 0;  // trailing dimension, cached for 2-D access
};

// y += a * x (same shape)
void axpy(double a, const Tensor& x, Tensor& y);

// c (+)= a [NxK] * b [KxM]; when accumulate is false c is overwritten.
void matmul(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate = false);
// c (+)= a [NxK] * b^T, b is [MxK]
void matmul_nt(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate = false);
// c (+)= a^T [KxN]^T... a is [KxN], result [NxM] from b [KxM]
void matmul_tn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate = false);

}  // namespace meshseq
