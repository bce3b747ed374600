#pragma once

// Dense row-major tensor. Rank is dynamic but almost everything in this
// library is a matrix [rows, cols]; images use [C, H, W]. GEMM is delegated
// to Eigen, everything else is plain loops.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace kad {

template <typename T>
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(numel_of(shape_), T(0));
  }

  Tensor(std::vector<int> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::size_t>(numel_of(shape_)) != data_.size()) {
      throw std::invalid_argument("Tensor: shape/data size mismatch");
    }
  }

  static Tensor full(std::vector<int> shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  int rows() const { return dim2() ? shape_[0] : (ndim() == 1 ? 1 : fail_rank()); }
  int cols() const { return dim2() ? shape_[1] : (ndim() == 1 ? shape_[0] : fail_rank()); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& raw() { return data_; }
  const std::vector<T>& raw() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  T& at(int r, int c) { return data_[static_cast<std::size_t>(r) * cols() + c]; }
  const T& at(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols() + c]; }

  Tensor reshaped(std::vector<int> shape) const {
    if (numel_of(shape) != numel()) {
      throw std::invalid_argument("Tensor::reshaped: element count mismatch");
    }
    return Tensor(std::move(shape), data_);
  }

  Tensor<T> zeros_like() const { return Tensor(shape_); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      os << shape_[i] << (i + 1 < shape_.size() ? "," : "");
    }
    os << ']';
    return os.str();
  }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  static std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

private:
  bool dim2() const { return ndim() == 2; }
  [[noreturn]] int fail_rank() const {
    throw std::logic_error("Tensor: matrix accessor on tensor of shape " + shape_str());
  }

  std::vector<int> shape_;
  std::vector<T> data_;
};

namespace detail {
template <typename T>
using EigenMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using EigenCMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
}  // namespace detail

// C = A * B, shapes [m,k] x [k,n]. C is resized.
template <typename T>
void gemm(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw std::invalid_argument("gemm: inner dimensions " + a.shape_str() + " x " +
                                b.shape_str());
  }
  c = Tensor<T>({m, n});
  detail::EigenCMap<T> ma(a.data(), m, k);
  detail::EigenCMap<T> mb(b.data(), k, n);
  detail::EigenMap<T> mc(c.data(), m, n);
  mc.noalias() = ma * mb;
}

// C = A * B^T, shapes [m,k] x [n,k].
template <typename T>
void gemm_nt(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  const int m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw std::invalid_argument("gemm_nt: inner dimensions " + a.shape_str() + " x " +
                                b.shape_str() + "^T");
  }
  c = Tensor<T>({m, n});
  detail::EigenCMap<T> ma(a.data(), m, k);
  detail::EigenCMap<T> mb(b.data(), n, k);
  detail::EigenMap<T> mc(c.data(), m, n);
  mc.noalias() = ma * mb.transpose();
}

// C = A^T * B, shapes [k,m] x [k,n].
template <typename T>
void gemm_tn(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& c) {
  const int k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw std::invalid_argument("gemm_tn: inner dimensions " + a.shape_str() + "^T x " +
                                b.shape_str());
  }
  c = Tensor<T>({m, n});
  detail::EigenCMap<T> ma(a.data(), k, m);
  detail::EigenCMap<T> mb(b.data(), k, n);
  detail::EigenMap<T> mc(c.data(), m, n);
  mc.noalias() = ma.transpose() * mb;
}

// c += a (elementwise, shapes must match).
template <typename T>
void axpy(const Tensor<T>& a, Tensor<T>& c, T scale = T(1)) {
  if (!a.same_shape(c)) {
    throw std::invalid_argument("axpy: shape mismatch " + a.shape_str() + " vs " +
                                c.shape_str());
  }
  const T* pa = a.data();
  T* pc = c.data();
  const std::int64_t n = a.numel();
  for (std::int64_t i = 0; i < n; ++i) pc[i] += scale * pa[i];
}

}  // namespace kad
