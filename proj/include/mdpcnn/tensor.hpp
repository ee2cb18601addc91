#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mdpcnn/errors.hpp"

namespace mdpcnn {

// Dense rank-4 shape in (num, channels, height, width) order.
struct Shape4 {
  int n = 0;
  int k = 0;
  int h = 0;
  int w = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(n) * k * h * w;
  }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    return std::to_string(n) + "x" + std::to_string(k) + "x" +
           std::to_string(h) + "x" + std::to_string(w);
  }
};

// Dense rank-4 array, row-major in (N, K, H, W) order. Vectors ride as
// (N, D, 1, 1), matrices as (R, C, 1, 1), scalars as (1, 1, 1, 1).
template <typename T>
struct Tensor4 {
  Shape4 shape;
  std::vector<T> data;

  Tensor4() = default;

  explicit Tensor4(Shape4 s) : shape(s), data(s.count(), T(0)) {}

  Tensor4(Shape4 s, std::vector<T> values) : shape(s), data(std::move(values)) {
    if (data.size() != shape.count()) {
      throw ConfigError("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape.str());
    }
  }

  static Tensor4 zeros(int n, int k, int h, int w) {
    return Tensor4(Shape4{n, k, h, w});
  }

  static Tensor4 scalar(T v) {
    Tensor4 t(Shape4{1, 1, 1, 1});
    t.data[0] = v;
    return t;
  }

  // Flat vector batch (N rows of D values).
  static Tensor4 matrix(int rows, int cols, std::vector<T> values) {
    return Tensor4(Shape4{rows, cols, 1, 1}, std::move(values));
  }

  std::size_t size() const { return data.size(); }

  T& at(int n, int k, int h, int w) {
    return data[((static_cast<std::size_t>(n) * shape.k + k) * shape.h + h) *
                    shape.w + w];
  }
  const T& at(int n, int k, int h, int w) const {
    return data[((static_cast<std::size_t>(n) * shape.k + k) * shape.h + h) *
                    shape.w + w];
  }

  // Pointer to the (n, k) plane.
  T* plane(int n, int k) {
    return data.data() +
           (static_cast<std::size_t>(n) * shape.k + k) * shape.h * shape.w;
  }
  const T* plane(int n, int k) const {
    return data.data() +
           (static_cast<std::size_t>(n) * shape.k + k) * shape.h * shape.w;
  }

  // Pointer to sample n.
  T* sample(int n) {
    return data.data() + static_cast<std::size_t>(n) * sample_size();
  }
  const T* sample(int n) const {
    return data.data() + static_cast<std::size_t>(n) * sample_size();
  }
  std::size_t sample_size() const {
    return static_cast<std::size_t>(shape.k) * shape.h * shape.w;
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (const T& v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <typename U>
  Tensor4<U> cast() const {
    Tensor4<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) {
      out.data[i] = static_cast<U>(data[i]);
    }
    return out;
  }
};

using Tensor4f = Tensor4<float>;
using Tensor4d = Tensor4<double>;

}  // namespace mdpcnn
