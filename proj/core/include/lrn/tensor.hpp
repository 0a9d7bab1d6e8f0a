#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lrn/error.hpp"

namespace lrn {

// (batch, channel, row, col) extents of a rank-4 tensor.
struct Dims4 {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  bool operator==(const Dims4&) const = default;
  std::int64_t count() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
};

std::string to_string(const Dims4& d);

// Dense rank-4 array, row-major with w fastest, then h, then c, then n.
template <typename T>
struct Tensor4 {
  Dims4 dims;
  std::vector<T> data;

  Tensor4() = default;

  explicit Tensor4(Dims4 d, T value = T(0)) : dims(d) {
    if (d.n < 1 || d.c < 1 || d.h < 1 || d.w < 1)
      throw dim_error("tensor dims must all be >= 1, got " + to_string(d));
    data.assign(static_cast<std::size_t>(d.count()), value);
  }

  Tensor4(int n, int c, int h, int w, T value = T(0))
      : Tensor4(Dims4{n, c, h, w}, value) {}

  std::int64_t size() const { return dims.count(); }

  std::int64_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::int64_t>(n) * dims.c + c) * dims.h + y) * dims.w + x;
  }

  T& at(int n, int c, int y, int x) { return data[index(n, c, y, x)]; }
  T at(int n, int c, int y, int x) const { return data[index(n, c, y, x)]; }

  T* plane(int n, int c) { return data.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data.data() + index(n, c, 0, 0); }

  T* row(int n, int c, int y) { return data.data() + index(n, c, y, 0); }
  const T* row(int n, int c, int y) const {
    return data.data() + index(n, c, y, 0);
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

using Tensor4f = Tensor4<float>;
using Tensor4d = Tensor4<double>;

// Argmax positions recorded by maxpool2x2: one entry per pooled output
// element, the flat 0..3 index of the max inside its 2x2 source window
// (row-major window order, first occurrence wins on ties).
struct PoolIndices {
  Dims4 dims;
  std::vector<std::uint8_t> idx;
};

}  // namespace lrn
