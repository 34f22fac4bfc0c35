#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "tunemark/common.hpp"

namespace tunemark {

// Dense row-major tensor of rank 1..4. Value semantics throughout: copies
// are deep and independently mutable.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    require(!shape_.empty() && shape_.size() <= 4, "tensor rank must be 1..4");
    long n = 1;
    for (int d : shape_) {
      require(d >= 0, "tensor dims must be nonnegative");
      n *= d;
    }
    data_.assign(static_cast<size_t>(n), T(0));
  }

  Tensor(std::initializer_list<int> shape) : Tensor(std::vector<int>(shape)) {}

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, T v) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  long size() const { return static_cast<long>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](long i) { return data_[static_cast<size_t>(i)]; }
  const T& operator[](long i) const { return data_[static_cast<size_t>(i)]; }

  // Rank-4 indexing (b, c, y, x); lower ranks use the leading helpers.
  T& at(int b, int c, int y, int x) {
    return data_[static_cast<size_t>(((static_cast<long>(b) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x)];
  }
  const T& at(int b, int c, int y, int x) const {
    return const_cast<Tensor*>(this)->at(b, c, y, x);
  }
  T& at(int c, int y, int x) {
    return data_[static_cast<size_t>((static_cast<long>(c) * shape_[1] + y) * shape_[2] + x)];
  }
  const T& at(int c, int y, int x) const { return const_cast<Tensor*>(this)->at(c, y, x); }
  T& at(int i, int j) { return data_[static_cast<size_t>(static_cast<long>(i) * shape_[1] + j)]; }
  const T& at(int i, int j) const { return const_cast<Tensor*>(this)->at(i, j); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const T& v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  T max_abs() const {
    T m = T(0);
    for (const T& v : data_) m = std::max(m, static_cast<T>(std::abs(static_cast<double>(v))));
    return m;
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (long i = 0; i < size(); ++i) out[i] = static_cast<U>(data_[static_cast<size_t>(i)]);
    return out;
  }

  const std::vector<T>& storage() const { return data_; }
  std::vector<T>& storage() { return data_; }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

template <typename T>
inline void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const std::string& what) {
  require(a.same_shape(b), what + ": shape mismatch");
}

template <typename T>
inline Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "tensor add");
  Tensor<T> out = a;
  for (long i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <typename T>
inline Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "tensor sub");
  Tensor<T> out = a;
  for (long i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

template <typename T>
inline Tensor<T> operator*(T s, const Tensor<T>& a) {
  Tensor<T> out = a;
  for (long i = 0; i < out.size(); ++i) out[i] *= s;
  return out;
}

template <typename T>
inline void axpy(T alpha, const Tensor<T>& x, Tensor<T>& y) {
  check_same_shape(x, y, "axpy");
  for (long i = 0; i < y.size(); ++i) y[i] += alpha * x[i];
}

template <typename T>
inline double dot(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "dot");
  double s = 0.0;
  for (long i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

template <typename T>
inline double l2_norm(const Tensor<T>& a) {
  return std::sqrt(dot(a, a));
}

template <typename T>
inline Tensor<T> clamp01(const Tensor<T>& a) {
  Tensor<T> out = a;
  for (long i = 0; i < out.size(); ++i) out[i] = std::clamp(out[i], T(0), T(1));
  return out;
}

}  // namespace tunemark
