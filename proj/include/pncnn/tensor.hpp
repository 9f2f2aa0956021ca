#pragma once
#include <cassert>
#include <cstddef>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>
#include <cblas.h>

#include "errors.hpp"

namespace pncnn {

// Dense row-major tensor of doubles. Rank 0 = scalar (one element).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(count_(shape_), fill) {}

  static Tensor scalar(double v) {
    Tensor t{std::vector<std::size_t>{}};
    t.data_[0] = v;
    return t;
  }
  static Tensor vec(std::initializer_list<double> xs) {
    Tensor t{{xs.size()}};
    std::size_t i = 0;
    for (double x : xs) t.data_[i++] = x;
    return t;
  }
  static Tensor mat(std::size_t r, std::size_t c, std::initializer_list<double> xs) {
    Tensor t{{r, c}};
    assert(xs.size() == r * c);
    std::size_t i = 0;
    for (double x : xs) t.data_[i++] = x;
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { assert(i < shape_.size()); return shape_[i]; }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { assert(i < data_.size()); return data_[i]; }
  double operator[](std::size_t i) const { assert(i < data_.size()); return data_[i]; }

  double& operator()(std::size_t i) { assert(rank() == 1); return data_[i]; }
  double operator()(std::size_t i) const { assert(rank() == 1); return data_[i]; }
  double& operator()(std::size_t i, std::size_t j) {
    assert(rank() == 2 && i < shape_[0] && j < shape_[1]);
    return data_[i * shape_[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    assert(rank() == 2 && i < shape_[0] && j < shape_[1]);
    return data_[i * shape_[1] + j];
  }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    assert(rank() == 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    assert(rank() == 3);
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  double value() const { assert(numel() == 1); return data_[0]; }

  Tensor reshaped(std::vector<std::size_t> s) const {
    Tensor t = *this;
    if (count_(s) != numel()) throw ShapeMismatch("reshape changes element count");
    t.shape_ = std::move(s);
    return t;
  }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }
  double max_abs() const {
    double m = 0.0;
    for (double x : data_) m = std::max(m, std::fabs(x));
    return m;
  }
  double sum() const { return std::accumulate(data_.begin(), data_.end(), 0.0); }

 private:
  static std::size_t count_(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

inline void check_shape(bool ok, const char* what) {
  if (!ok) throw ShapeMismatch(what);
}

// C = op(A) * op(B) through dgemm.
inline Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false) {
  check_shape(a.rank() == 2 && b.rank() == 2, "matmul wants rank-2 operands");
  const std::size_t m = ta ? a.dim(1) : a.dim(0);
  const std::size_t k = ta ? a.dim(0) : a.dim(1);
  const std::size_t kb = tb ? b.dim(1) : b.dim(0);
  const std::size_t n = tb ? b.dim(0) : b.dim(1);
  check_shape(k == kb, "matmul inner dims differ");
  Tensor c{{m, n}};
  if (m == 0 || n == 0 || k == 0) return c;
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              (int)m, (int)n, (int)k, 1.0, a.data(), (int)a.dim(1), b.data(), (int)b.dim(1),
              0.0, c.data(), (int)n);
  return c;
}

inline Tensor transpose(const Tensor& a) {
  check_shape(a.rank() == 2, "transpose wants rank-2");
  Tensor t{{a.dim(1), a.dim(0)}};
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) t(j, i) = a(i, j);
  return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  check_shape(a.same_shape(b), "add shapes differ");
  Tensor c = a;
  for (std::size_t i = 0; i < c.numel(); ++i) c[i] += b[i];
  return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  check_shape(a.same_shape(b), "sub shapes differ");
  Tensor c = a;
  for (std::size_t i = 0; i < c.numel(); ++i) c[i] -= b[i];
  return c;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (std::size_t i = 0; i < c.numel(); ++i) c[i] *= s;
  return c;
}

inline void axpy(double alpha, const Tensor& x, Tensor& y) {
  check_shape(x.same_shape(y), "axpy shapes differ");
  cblas_daxpy((int)x.numel(), alpha, x.data(), 1, y.data(), 1);
}

inline double dot(const Tensor& a, const Tensor& b) {
  check_shape(a.numel() == b.numel(), "dot lengths differ");
  return cblas_ddot((int)a.numel(), a.data(), 1, b.data(), 1);
}

inline Tensor eye(std::size_t n) {
  Tensor t{{n, n}};
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

}  // namespace pncnn
