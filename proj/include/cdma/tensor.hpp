#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "cdma/error.hpp"

namespace cdma {

/// Dense N-dimensional value grid, row-major. 4-D maps use the layout
/// batch x channel x height x width. Templated on the scalar so training
/// runs in float and gradient checking in double.
template <class T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T> data;
  bool requires_grad = false;

  TensorT() = default;

  explicit TensorT(std::vector<int> s, T fill = T(0)) : shape(std::move(s)) {
    for (int d : shape) check(d > 0, "tensor dimensions must be positive");
    data.assign(static_cast<size_t>(count(shape)), fill);
  }

  TensorT(std::vector<int> s, std::vector<T> values)
      : shape(std::move(s)), data(std::move(values)) {
    check(count(shape) == static_cast<int64_t>(data.size()),
          "tensor data length does not match shape");
  }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }

  static TensorT zeros(std::vector<int> s) { return TensorT(std::move(s)); }
  static TensorT full(std::vector<int> s, T v) {
    return TensorT(std::move(s), v);
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  bool empty() const { return data.empty(); }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // 4-D accessors (b, c, h, w).
  T& at4(int b, int c, int h, int w) {
    return data[idx4(b, c, h, w)];
  }
  const T& at4(int b, int c, int h, int w) const {
    return data[idx4(b, c, h, w)];
  }
  size_t idx4(int b, int c, int h, int w) const {
    return static_cast<size_t>(
        ((static_cast<int64_t>(b) * shape[1] + c) * shape[2] + h) * shape[3] +
        w);
  }

  // 2-D accessor (row, col).
  T& at2(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
  const T& at2(int r, int c) const {
    return data[static_cast<size_t>(r) * shape[1] + c];
  }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <class U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) {
      out.data[i] = static_cast<U>(data[i]);
    }
    return out;
  }
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

}  // namespace cdma
