#include "meshseq/tensor.hpp"

#include <cmath>

namespace meshseq {

namespace {
std::size_t shape_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}
}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {
  cols_ = shape_.empty() ? 0 : shape_.back();
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  require(data_.size() == shape_size(shape_), "Tensor: data size does not match shape");
  cols_ = shape_.empty() ? 0 : shape_.back();
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

std::size_t Tensor::rows() const {
  require(rank() == 2, "Tensor: rows() requires rank 2");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require(rank() == 2, "Tensor: cols() requires rank 2");
  return shape_[1];
}

double Tensor::scalar_value() const {
  require(size() == 1, "Tensor: not a scalar");
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

void Tensor::reshape(std::vector<std::size_t> shape) {
  require(shape_size(shape) == data_.size(), "Tensor: reshape size mismatch");
  shape_ = std::move(shape);
  cols_ = shape_.empty() ? 0 : shape_.back();
}

void axpy(double a, const Tensor& x, Tensor& y) {
  require(x.size() == y.size(), "axpy: size mismatch");
  const double* xs = x.data();
  double* ys = y.data();
  for (std::size_t i = 0; i < x.size(); ++i) ys[i] += a * xs[i];
}

void matmul(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  require(b.rows() == k, "matmul: inner dimension mismatch");
  require(c.rows() == n && c.cols() == m, "matmul: output shape mismatch");
  if (!accumulate) c.fill(0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.row(i);
    double* cr = c.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      const double* br = b.row(p);
      for (std::size_t j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
}

void matmul_nt(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  require(b.cols() == k, "matmul_nt: inner dimension mismatch");
  require(c.rows() == n && c.cols() == m, "matmul_nt: output shape mismatch");
  if (!accumulate) c.fill(0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.row(i);
    double* cr = c.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      const double* br = b.row(j);
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      cr[j] += s;
    }
  }
}

void matmul_tn(const Tensor& a, const Tensor& b, Tensor& c, bool accumulate) {
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  require(b.rows() == k, "matmul_tn: inner dimension mismatch");
  require(c.rows() == n && c.cols() == m, "matmul_tn: output shape mismatch");
  if (!accumulate) c.fill(0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ar = a.row(p);
    const double* br = b.row(p);
    for (std::size_t i = 0; i < n; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* cr = c.row(i);
      for (std::size_t j = 0; j < m; ++j) cr[j] += av * br[j];
    }
  }
}

}  // namespace meshseq
