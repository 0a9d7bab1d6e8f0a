#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include "doctest.h"
#include "lrn/tensor.hpp"

namespace lrn::test {

template <typename T>
inline void check_close(const Tensor4<T>& a, const Tensor4<T>& b,
                        double rel = 1e-6, double abs_floor = 1e-9) {
  REQUIRE(a.dims == b.dims);
  double worst = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) {
    const double diff = std::fabs(double(a.data[i]) - double(b.data[i]));
    const double denom = std::max(
        {std::fabs(double(a.data[i])), std::fabs(double(b.data[i])), abs_floor});
    worst = std::max(worst, diff / denom);
  }
  CHECK(worst <= rel);
}

template <typename T>
inline void check_bitwise(const Tensor4<T>& a, const Tensor4<T>& b) {
  REQUIRE(a.dims == b.dims);
  for (std::int64_t i = 0; i < a.size(); ++i) {
    if (a.data[i] != b.data[i]) {
      CAPTURE(i);
      REQUIRE(a.data[i] == b.data[i]);
    }
  }
  CHECK(true);
}

template <typename T>
inline Tensor4<T> random_tensor(std::mt19937_64& rng, int n, int c, int h,
                                int w, double stddev = 1.0) {
  Tensor4<T> t(n, c, h, w);
  std::normal_distribution<double> dist(0.0, stddev);
  for (T& v : t.data) v = static_cast<T>(dist(rng));
  return t;
}

// Independent reference convolution: the direct seven-loop translation of
// the definition, used as the oracle for the optimized kernel.
template <typename T>
inline Tensor4<T> naive_conv3x3(const Tensor4<T>& in, const Tensor4<T>& wgt,
                                const std::vector<T>& bias) {
  const int n = in.dims.n, cin = in.dims.c, h = in.dims.h, w = in.dims.w;
  const int cout = wgt.dims.n;
  Tensor4<T> out(n, cout, h, w);
  for (int ni = 0; ni < n; ++ni)
    for (int o = 0; o < cout; ++o)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          double acc = bias[o];
          for (int i = 0; i < cin; ++i)
            for (int dy = 0; dy < 3; ++dy)
              for (int dx = 0; dx < 3; ++dx) {
                const int sy = y + dy - 1, sx = x + dx - 1;
                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                acc += double(wgt.at(o, i, dy, dx)) * in.at(ni, i, sy, sx);
              }
          out.at(ni, o, y, x) = static_cast<T>(acc);
        }
  return out;
}

// Scratch directory unique to a test, removed eagerly on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("lrn_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace lrn::test
