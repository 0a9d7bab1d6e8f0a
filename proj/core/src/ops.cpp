#include "lrn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "lrn/parallel.hpp"

namespace lrn {

namespace {

template <typename T>
void check_finite(const Tensor4<T>& t, const char* what) {
  if (!t.all_finite())
    throw data_error(std::string("non-finite values in ") + what);
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* what) {
  for (const T& x : v)
    if (!std::isfinite(x))
      throw data_error(std::string("non-finite values in ") + what);
}

}  // namespace

// ---------------------------------------------------------------- conv3x3

template <typename T>
Tensor4<T> conv3x3(const Tensor4<T>& input, const Tensor4<T>& weight,
                   const std::vector<T>& bias) {
  if (weight.dims.h != 3 || weight.dims.w != 3)
    throw dim_error("conv3x3 weight must be (cout,cin,3,3), got " +
                    to_string(weight.dims));
  if (input.dims.c != weight.dims.c)
    throw dim_error("conv3x3 channel mismatch: input " + to_string(input.dims) +
                    " vs weight " + to_string(weight.dims));
  if (static_cast<int>(bias.size()) != weight.dims.n)
    throw dim_error("conv3x3 bias length " + std::to_string(bias.size()) +
                    " != cout " + std::to_string(weight.dims.n));
  check_finite(input, "conv3x3 input");
  check_finite(weight, "conv3x3 weight");
  check_finite(bias, "conv3x3 bias");

  const int n = input.dims.n, cin = input.dims.c;
  const int h = input.dims.h, w = input.dims.w;
  const int cout = weight.dims.n;
  Tensor4<T> out(n, cout, h, w);

  parallel_for(static_cast<std::int64_t>(n) * cout, [&](std::int64_t b,
                                                        std::int64_t e) {
    for (std::int64_t p = b; p < e; ++p) {
      const int ni = static_cast<int>(p / cout);
      const int o = static_cast<int>(p % cout);
      for (int y = 0; y < h; ++y) {
        T* orow = out.row(ni, o, y);
        for (int x = 0; x < w; ++x) orow[x] = bias[o];
        for (int i = 0; i < cin; ++i) {
          const T* k = weight.plane(o, i);
          for (int dy = 0; dy < 3; ++dy) {
            const int sy = y + dy - 1;
            if (sy < 0 || sy >= h) continue;
            const T* r = input.row(ni, i, sy);
            const T k0 = k[dy * 3 + 0], k1 = k[dy * 3 + 1], k2 = k[dy * 3 + 2];
            if (w == 1) {
              orow[0] += k1 * r[0];
              continue;
            }
            orow[0] += k1 * r[0] + k2 * r[1];
            for (int x = 1; x < w - 1; ++x)
              orow[x] += k0 * r[x - 1] + k1 * r[x] + k2 * r[x + 1];
            orow[w - 1] += k0 * r[w - 2] + k1 * r[w - 1];
          }
        }
      }
    }
  });
  return out;
}

template <typename T>
Conv3x3Grads<T> conv3x3_backward(const Tensor4<T>& input,
                                 const Tensor4<T>& weight,
                                 const Tensor4<T>& grad_out) {
  const int n = input.dims.n, cin = input.dims.c;
  const int h = input.dims.h, w = input.dims.w;
  const int cout = weight.dims.n;
  if (weight.dims.h != 3 || weight.dims.w != 3 || weight.dims.c != cin)
    throw dim_error("conv3x3_backward weight shape mismatch");
  if (!(grad_out.dims == Dims4{n, cout, h, w}))
    throw dim_error("conv3x3_backward grad_out " + to_string(grad_out.dims) +
                    " inconsistent with input " + to_string(input.dims) +
                    " and weight " + to_string(weight.dims));

  Conv3x3Grads<T> g;
  g.input = Tensor4<T>(n, cin, h, w);
  g.weight = Tensor4<T>(cout, cin, 3, 3);
  g.bias.assign(cout, T(0));

  // d/d input: correlation of grad_out with the flipped kernel.
  parallel_for(static_cast<std::int64_t>(n) * cin, [&](std::int64_t b,
                                                       std::int64_t e) {
    for (std::int64_t p = b; p < e; ++p) {
      const int ni = static_cast<int>(p / cin);
      const int i = static_cast<int>(p % cin);
      for (int y = 0; y < h; ++y) {
        T* grow = g.input.row(ni, i, y);
        for (int o = 0; o < cout; ++o) {
          const T* k = weight.plane(o, i);
          for (int dy = 0; dy < 3; ++dy) {
            const int gy = y + 1 - dy;
            if (gy < 0 || gy >= h) continue;
            const T* r = grad_out.row(ni, o, gy);
            // column dx contributes from grad_out col x + 1 - dx
            const T k0 = k[dy * 3 + 0], k1 = k[dy * 3 + 1], k2 = k[dy * 3 + 2];
            if (w == 1) {
              grow[0] += k1 * r[0];
              continue;
            }
            grow[0] += k1 * r[0] + k0 * r[1];
            for (int x = 1; x < w - 1; ++x)
              grow[x] += k2 * r[x - 1] + k1 * r[x] + k0 * r[x + 1];
            grow[w - 1] += k2 * r[w - 2] + k1 * r[w - 1];
          }
        }
      }
    }
  });

  // d/d weight: per (o,i) pair, nine dot products accumulated over (n,y,x).
  parallel_for(static_cast<std::int64_t>(cout) * cin, [&](std::int64_t b,
                                                          std::int64_t e) {
    for (std::int64_t p = b; p < e; ++p) {
      const int o = static_cast<int>(p / cin);
      const int i = static_cast<int>(p % cin);
      T acc[9] = {T(0)};
      for (int ni = 0; ni < n; ++ni) {
        for (int y = 0; y < h; ++y) {
          const T* gr = grad_out.row(ni, o, y);
          for (int dy = 0; dy < 3; ++dy) {
            const int sy = y + dy - 1;
            if (sy < 0 || sy >= h) continue;
            const T* r = input.row(ni, i, sy);
            T a0 = T(0), a1 = T(0), a2 = T(0);
            for (int x = 1; x < w; ++x) a0 += gr[x] * r[x - 1];
            for (int x = 0; x < w; ++x) a1 += gr[x] * r[x];
            for (int x = 0; x < w - 1; ++x) a2 += gr[x] * r[x + 1];
            acc[dy * 3 + 0] += a0;
            acc[dy * 3 + 1] += a1;
            acc[dy * 3 + 2] += a2;
          }
        }
      }
      T* wp = g.weight.plane(o, i);
      for (int t = 0; t < 9; ++t) wp[t] = acc[t];
    }
  });

  // d/d bias: plain sum of grad_out per output channel.
  parallel_for(cout, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t o = b; o < e; ++o) {
      T acc = T(0);
      for (int ni = 0; ni < n; ++ni) {
        const T* pl = grad_out.plane(ni, static_cast<int>(o));
        for (std::int64_t t = 0; t < static_cast<std::int64_t>(h) * w; ++t)
          acc += pl[t];
      }
      g.bias[o] = acc;
    }
  });
  return g;
}

// -------------------------------------------------------------- maxpool2x2

template <typename T>
std::pair<Tensor4<T>, PoolIndices> maxpool2x2(const Tensor4<T>& input) {
  const int n = input.dims.n, c = input.dims.c;
  const int h = input.dims.h, w = input.dims.w;
  if (h % 2 != 0 || w % 2 != 0)
    throw dim_error("maxpool2x2 needs even spatial dims, got " +
                    to_string(input.dims));
  const int oh = h / 2, ow = w / 2;
  Tensor4<T> out(n, c, oh, ow);
  PoolIndices idx;
  idx.dims = out.dims;
  idx.idx.assign(static_cast<std::size_t>(out.size()), 0);

  parallel_for(static_cast<std::int64_t>(n) * c, [&](std::int64_t b,
                                                     std::int64_t e) {
    for (std::int64_t p = b; p < e; ++p) {
      const int ni = static_cast<int>(p / c);
      const int ci = static_cast<int>(p % c);
      for (int y = 0; y < oh; ++y) {
        const T* r0 = input.row(ni, ci, 2 * y);
        const T* r1 = input.row(ni, ci, 2 * y + 1);
        T* orow = out.row(ni, ci, y);
        std::uint8_t* irow = idx.idx.data() + out.index(ni, ci, y, 0);
        for (int x = 0; x < ow; ++x) {
          const T cand[4] = {r0[2 * x], r0[2 * x + 1], r1[2 * x],
                             r1[2 * x + 1]};
          int best = 0;
          for (int t = 1; t < 4; ++t)
            if (cand[t] > cand[best]) best = t;
          orow[x] = cand[best];
          irow[x] = static_cast<std::uint8_t>(best);
        }
      }
    }
  });
  return {std::move(out), std::move(idx)};
}

template <typename T>
Tensor4<T> maxpool2x2_backward(const PoolIndices& idx,
                               const Tensor4<T>& grad_out) {
  if (!(idx.dims == grad_out.dims))
    throw dim_error("maxpool2x2_backward dims mismatch: idx " +
                    to_string(idx.dims) + " vs grad " +
                    to_string(grad_out.dims));
  const int n = grad_out.dims.n, c = grad_out.dims.c;
  const int oh = grad_out.dims.h, ow = grad_out.dims.w;
  Tensor4<T> grad_in(n, c, oh * 2, ow * 2);

  parallel_for(static_cast<std::int64_t>(n) * c, [&](std::int64_t b,
                                                     std::int64_t e) {
    for (std::int64_t p = b; p < e; ++p) {
      const int ni = static_cast<int>(p / c);
      const int ci = static_cast<int>(p % c);
      for (int y = 0; y < oh; ++y) {
        const T* grow = grad_out.row(ni, ci, y);
        const std::uint8_t* irow = idx.idx.data() + grad_out.index(ni, ci, y, 0);
        for (int x = 0; x < ow; ++x) {
          const int dy = irow[x] >> 1, dx = irow[x] & 1;
          grad_in.at(ni, ci, 2 * y + dy, 2 * x + dx) = grow[x];
        }
      }
    }
  });
  return grad_in;
}

// -------------------------------------------------------------------- relu

template <typename T>
Tensor4<T> relu(const Tensor4<T>& input) {
  Tensor4<T> out(input.dims);
  parallel_for(input.size(), [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i)
      out.data[i] = input.data[i] > T(0) ? input.data[i] : T(0);
  });
  return out;
}

template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& input, const Tensor4<T>& grad_out) {
  if (!(input.dims == grad_out.dims))
    throw dim_error("relu_backward dims mismatch");
  Tensor4<T> grad_in(input.dims);
  parallel_for(input.size(), [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i)
      grad_in.data[i] = input.data[i] > T(0) ? grad_out.data[i] : T(0);
  });
  return grad_in;
}

// --------------------------------------------------------------- batchnorm

template <typename T>
Tensor4<T> batchnorm(const Tensor4<T>& input, const std::vector<T>& gamma,
                     const std::vector<T>& beta, BnState<T>& state,
                     BnMode mode, BnCache<T>* cache) {
  const int n = input.dims.n, c = input.dims.c;
  const int h = input.dims.h, w = input.dims.w;
  if (static_cast<int>(gamma.size()) != c ||
      static_cast<int>(beta.size()) != c ||
      static_cast<int>(state.running_mean.size()) != c ||
      static_cast<int>(state.running_var.size()) != c)
    throw dim_error("batchnorm: gamma/beta/state length != channels " +
                    std::to_string(c));

  Tensor4<T> out(input.dims);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t m = static_cast<std::int64_t>(n) * plane;

  if (mode == BnMode::infer) {
    parallel_for(c, [&](std::int64_t b, std::int64_t e) {
      for (std::int64_t ci = b; ci < e; ++ci) {
        const T inv = T(1) / std::sqrt(state.running_var[ci] + state.eps);
        const T g = gamma[ci], bt = beta[ci], mu = state.running_mean[ci];
        for (int ni = 0; ni < n; ++ni) {
          const T* src = input.plane(ni, static_cast<int>(ci));
          T* dst = out.plane(ni, static_cast<int>(ci));
          for (std::int64_t t = 0; t < plane; ++t)
            dst[t] = g * (src[t] - mu) * inv + bt;
        }
      }
    });
    return out;
  }

  if (cache) {
    cache->xhat = Tensor4<T>(input.dims);
    cache->inv_std.assign(c, T(0));
  }

  parallel_for(c, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t ci = b; ci < e; ++ci) {
      // Two-pass mean/variance, accumulated in double.
      double sum = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const T* src = input.plane(ni, static_cast<int>(ci));
        for (std::int64_t t = 0; t < plane; ++t) sum += src[t];
      }
      const double mean = sum / static_cast<double>(m);
      double var_sum = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const T* src = input.plane(ni, static_cast<int>(ci));
        for (std::int64_t t = 0; t < plane; ++t) {
          const double d = src[t] - mean;
          var_sum += d * d;
        }
      }
      const double var = var_sum / static_cast<double>(m);
      const T mu = static_cast<T>(mean);
      const T inv = static_cast<T>(1.0 / std::sqrt(var + state.eps));
      const T g = gamma[ci], bt = beta[ci];
      for (int ni = 0; ni < n; ++ni) {
        const T* src = input.plane(ni, static_cast<int>(ci));
        T* dst = out.plane(ni, static_cast<int>(ci));
        T* xh = cache ? cache->xhat.plane(ni, static_cast<int>(ci)) : nullptr;
        for (std::int64_t t = 0; t < plane; ++t) {
          const T xhat = (src[t] - mu) * inv;
          if (xh) xh[t] = xhat;
          dst[t] = g * xhat + bt;
        }
      }
      if (cache) cache->inv_std[ci] = inv;
      state.running_mean[ci] = state.momentum * state.running_mean[ci] +
                               (T(1) - state.momentum) * static_cast<T>(mean);
      state.running_var[ci] = state.momentum * state.running_var[ci] +
                              (T(1) - state.momentum) * static_cast<T>(var);
    }
  });
  return out;
}

template <typename T>
BnGrads<T> batchnorm_backward(const std::vector<T>& gamma,
                              const BnCache<T>& cache,
                              const Tensor4<T>& grad_out) {
  if (!(cache.xhat.dims == grad_out.dims))
    throw dim_error("batchnorm_backward: cache/grad dims mismatch");
  const int n = grad_out.dims.n, c = grad_out.dims.c;
  const std::int64_t plane =
      static_cast<std::int64_t>(grad_out.dims.h) * grad_out.dims.w;
  const std::int64_t m = static_cast<std::int64_t>(n) * plane;
  if (static_cast<int>(gamma.size()) != c ||
      static_cast<int>(cache.inv_std.size()) != c)
    throw dim_error("batchnorm_backward: gamma/cache length != channels");

  BnGrads<T> g;
  g.input = Tensor4<T>(grad_out.dims);
  g.gamma.assign(c, T(0));
  g.beta.assign(c, T(0));

  parallel_for(c, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t ci = b; ci < e; ++ci) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const T* dy = grad_out.plane(ni, static_cast<int>(ci));
        const T* xh = cache.xhat.plane(ni, static_cast<int>(ci));
        for (std::int64_t t = 0; t < plane; ++t) {
          sum_dy += dy[t];
          sum_dy_xhat += static_cast<double>(dy[t]) * xh[t];
        }
      }
      g.beta[ci] = static_cast<T>(sum_dy);
      g.gamma[ci] = static_cast<T>(sum_dy_xhat);
      const T mean_dy = static_cast<T>(sum_dy / static_cast<double>(m));
      const T mean_dy_xhat =
          static_cast<T>(sum_dy_xhat / static_cast<double>(m));
      const T scale = gamma[ci] * cache.inv_std[ci];
      for (int ni = 0; ni < n; ++ni) {
        const T* dy = grad_out.plane(ni, static_cast<int>(ci));
        const T* xh = cache.xhat.plane(ni, static_cast<int>(ci));
        T* dx = g.input.plane(ni, static_cast<int>(ci));
        for (std::int64_t t = 0; t < plane; ++t)
          dx[t] = scale * (dy[t] - mean_dy - xh[t] * mean_dy_xhat);
      }
    }
  });
  return g;
}

// ------------------------------------------------------ bilinear upsampling

namespace {

// Per-destination source taps for 2x half-pixel-center upsampling.
template <typename T>
struct LerpTaps {
  std::vector<int> lo, hi;
  std::vector<T> frac;
};

template <typename T>
LerpTaps<T> make_taps(int src_size) {
  const int dst_size = src_size * 2;
  LerpTaps<T> taps;
  taps.lo.resize(dst_size);
  taps.hi.resize(dst_size);
  taps.frac.resize(dst_size);
  for (int d = 0; d < dst_size; ++d) {
    double s = (d + 0.5) / 2.0 - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src_size - 1));
    const int lo = static_cast<int>(std::floor(s));
    taps.lo[d] = lo;
    taps.hi[d] = std::min(lo + 1, src_size - 1);
    taps.frac[d] = static_cast<T>(s - lo);
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor4<T> upsample_bilinear2x(const Tensor4<T>& input) {
  const int n = input.dims.n, c = input.dims.c;
  const int h = input.dims.h, w = input.dims.w;
  Tensor4<T> out(n, c, 2 * h, 2 * w);
  const LerpTaps<T> ty = make_taps<T>(h);
  const LerpTaps<T> tx = make_taps<T>(w);

  parallel_for(static_cast<std::int64_t>(n) * c, [&](std::int64_t b,
                                                     std::int64_t e) {
    for (std::int64_t p = b; p < e; ++p) {
      const int ni = static_cast<int>(p / c);
      const int ci = static_cast<int>(p % c);
      for (int dy = 0; dy < 2 * h; ++dy) {
        const T* r0 = input.row(ni, ci, ty.lo[dy]);
        const T* r1 = input.row(ni, ci, ty.hi[dy]);
        const T fy = ty.frac[dy];
        T* orow = out.row(ni, ci, dy);
        for (int dx = 0; dx < 2 * w; ++dx) {
          const int x0 = tx.lo[dx], x1 = tx.hi[dx];
          const T fx = tx.frac[dx];
          // lerp form keeps constant fields exact
          const T top = r0[x0] + fx * (r0[x1] - r0[x0]);
          const T bot = r1[x0] + fx * (r1[x1] - r1[x0]);
          orow[dx] = top + fy * (bot - top);
        }
      }
    }
  });
  return out;
}

template <typename T>
Tensor4<T> upsample_bilinear2x_backward(const Tensor4<T>& grad_out) {
  const int n = grad_out.dims.n, c = grad_out.dims.c;
  const int dh = grad_out.dims.h, dw = grad_out.dims.w;
  if (dh % 2 != 0 || dw % 2 != 0)
    throw dim_error("upsample_bilinear2x_backward needs even grad dims");
  const int h = dh / 2, w = dw / 2;
  const LerpTaps<T> ty = make_taps<T>(h);
  const LerpTaps<T> tx = make_taps<T>(w);

  // Invert the tap tables: for each source index, the destinations that
  // read it and with what weight. Gathering keeps the pass race-free and
  // the summation order fixed.
  auto invert = [](const LerpTaps<T>& taps, int src_size) {
    std::vector<std::vector<std::pair<int, T>>> touch(src_size);
    for (int d = 0; d < static_cast<int>(taps.lo.size()); ++d) {
      const T f = taps.frac[d];
      if (taps.lo[d] == taps.hi[d]) {
        touch[taps.lo[d]].emplace_back(d, T(1));
      } else {
        touch[taps.lo[d]].emplace_back(d, T(1) - f);
        touch[taps.hi[d]].emplace_back(d, f);
      }
    }
    return touch;
  };
  const auto touch_y = invert(ty, h);
  const auto touch_x = invert(tx, w);

  Tensor4<T> grad_in(n, c, h, w);
  parallel_for(static_cast<std::int64_t>(n) * c, [&](std::int64_t b,
                                                     std::int64_t e) {
    for (std::int64_t p = b; p < e; ++p) {
      const int ni = static_cast<int>(p / c);
      const int ci = static_cast<int>(p % c);
      for (int sy = 0; sy < h; ++sy) {
        T* grow = grad_in.row(ni, ci, sy);
        for (const auto& [dy, wy] : touch_y[sy]) {
          const T* r = grad_out.row(ni, ci, dy);
          for (int sx = 0; sx < w; ++sx) {
            T acc = T(0);
            for (const auto& [dx, wx] : touch_x[sx]) acc += wx * r[dx];
            grow[sx] += wy * acc;
          }
        }
      }
    }
  });
  return grad_in;
}

// ------------------------------------------------------------ concat/split

template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b) {
  if (a.dims.n != b.dims.n || a.dims.h != b.dims.h || a.dims.w != b.dims.w)
    throw dim_error("concat_channels: batch/spatial mismatch " +
                    to_string(a.dims) + " vs " + to_string(b.dims));
  Tensor4<T> out(a.dims.n, a.dims.c + b.dims.c, a.dims.h, a.dims.w);
  const std::int64_t plane = static_cast<std::int64_t>(a.dims.h) * a.dims.w;
  parallel_for(a.dims.n, [&](std::int64_t nb, std::int64_t ne) {
    for (std::int64_t ni = nb; ni < ne; ++ni) {
      std::memcpy(out.plane(static_cast<int>(ni), 0),
                  a.plane(static_cast<int>(ni), 0),
                  sizeof(T) * plane * a.dims.c);
      std::memcpy(out.plane(static_cast<int>(ni), a.dims.c),
                  b.plane(static_cast<int>(ni), 0),
                  sizeof(T) * plane * b.dims.c);
    }
  });
  return out;
}

template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> split_backward(const Tensor4<T>& grad_out,
                                                 int c_a) {
  if (c_a < 1 || c_a >= grad_out.dims.c)
    throw dim_error("split_backward: invalid split point " +
                    std::to_string(c_a) + " for " + to_string(grad_out.dims));
  const int c_b = grad_out.dims.c - c_a;
  Tensor4<T> ga(grad_out.dims.n, c_a, grad_out.dims.h, grad_out.dims.w);
  Tensor4<T> gb(grad_out.dims.n, c_b, grad_out.dims.h, grad_out.dims.w);
  const std::int64_t plane =
      static_cast<std::int64_t>(grad_out.dims.h) * grad_out.dims.w;
  parallel_for(grad_out.dims.n, [&](std::int64_t nb, std::int64_t ne) {
    for (std::int64_t ni = nb; ni < ne; ++ni) {
      std::memcpy(ga.plane(static_cast<int>(ni), 0),
                  grad_out.plane(static_cast<int>(ni), 0),
                  sizeof(T) * plane * c_a);
      std::memcpy(gb.plane(static_cast<int>(ni), 0),
                  grad_out.plane(static_cast<int>(ni), c_a),
                  sizeof(T) * plane * c_b);
    }
  });
  return {std::move(ga), std::move(gb)};
}

// ----------------------------------------------------------------- softmax

template <typename T>
Tensor4<T> softmax_channels(const Tensor4<T>& logits) {
  const int n = logits.dims.n, c = logits.dims.c;
  const int h = logits.dims.h, w = logits.dims.w;
  Tensor4<T> out(logits.dims);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;

  parallel_for(static_cast<std::int64_t>(n) * h, [&](std::int64_t b,
                                                     std::int64_t e) {
    for (std::int64_t p = b; p < e; ++p) {
      const int ni = static_cast<int>(p / h);
      const int y = static_cast<int>(p % h);
      const std::int64_t base = logits.index(ni, 0, y, 0);
      for (int x = 0; x < w; ++x) {
        const T* px = logits.data.data() + base + x;
        T* ox = out.data.data() + base + x;
        T mx = px[0];
        for (int ci = 1; ci < c; ++ci)
          mx = std::max(mx, px[ci * plane]);
        T sum = T(0);
        for (int ci = 0; ci < c; ++ci) {
          const T v = std::exp(px[ci * plane] - mx);
          ox[ci * plane] = v;
          sum += v;
        }
        const T inv = T(1) / sum;
        for (int ci = 0; ci < c; ++ci) ox[ci * plane] *= inv;
      }
    }
  });
  return out;
}

// ----------------------------------------------------------- cross entropy

template <typename T>
CrossEntropyResult<T> weighted_cross_entropy(
    const Tensor4<T>& probs, const std::vector<LabelMap>& target,
    const std::vector<T>& class_weights) {
  const int n = probs.dims.n, c = probs.dims.c;
  const int h = probs.dims.h, w = probs.dims.w;
  if (static_cast<int>(target.size()) != n)
    throw dim_error("weighted_cross_entropy: target batch size " +
                    std::to_string(target.size()) + " != " + std::to_string(n));
  for (const LabelMap& lm : target)
    if (lm.h != h || lm.w != w)
      throw dim_error("weighted_cross_entropy: target dims mismatch");
  if (static_cast<int>(class_weights.size()) != c)
    throw dim_error("weighted_cross_entropy: weight count != classes");

  std::int64_t valid = 0;
  for (int ni = 0; ni < n; ++ni) {
    for (const std::uint8_t lab : target[ni].v) {
      if (lab == kIgnoreLabel) continue;
      if (lab >= c)
        throw data_error("label " + std::to_string(lab) + " out of range [0," +
                         std::to_string(c) + ")");
      ++valid;
    }
  }

  CrossEntropyResult<T> res;
  res.grad_logits = Tensor4<T>(probs.dims);
  if (valid == 0) return res;

  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const double inv_p = 1.0 / static_cast<double>(valid);

  // Scalar loss reduced sequentially in (n, y, x) order at double width.
  double loss = 0.0;
  for (int ni = 0; ni < n; ++ni) {
    const T* pr = probs.plane(ni, 0);
    const std::uint8_t* lab = target[ni].v.data();
    for (std::int64_t t = 0; t < plane; ++t) {
      if (lab[t] == kIgnoreLabel) continue;
      const double p = std::max(static_cast<double>(pr[lab[t] * plane + t]),
                                1e-300);
      loss += static_cast<double>(class_weights[lab[t]]) * -std::log(p);
    }
  }
  res.loss = loss * inv_p;

  Tensor4<T>& g = res.grad_logits;
  parallel_for(n, [&](std::int64_t nb, std::int64_t ne) {
    for (std::int64_t ni = nb; ni < ne; ++ni) {
      const T* pr = probs.plane(static_cast<int>(ni), 0);
      T* gp = g.plane(static_cast<int>(ni), 0);
      const std::uint8_t* lab = target[ni].v.data();
      for (std::int64_t t = 0; t < plane; ++t) {
        if (lab[t] == kIgnoreLabel) continue;
        const T scale = static_cast<T>(
            static_cast<double>(class_weights[lab[t]]) * inv_p);
        for (int ci = 0; ci < c; ++ci) {
          const T onehot = (ci == lab[t]) ? T(1) : T(0);
          gp[ci * plane + t] = scale * (pr[ci * plane + t] - onehot);
        }
      }
    }
  });
  return res;
}

// ---------------------------------------------------------- instantiations

#define LRN_INSTANTIATE_OPS(T)                                               \
  template Tensor4<T> conv3x3<T>(const Tensor4<T>&, const Tensor4<T>&,       \
                                 const std::vector<T>&);                     \
  template Conv3x3Grads<T> conv3x3_backward<T>(                              \
      const Tensor4<T>&, const Tensor4<T>&, const Tensor4<T>&);              \
  template std::pair<Tensor4<T>, PoolIndices> maxpool2x2<T>(                 \
      const Tensor4<T>&);                                                    \
  template Tensor4<T> maxpool2x2_backward<T>(const PoolIndices&,             \
                                             const Tensor4<T>&);             \
  template Tensor4<T> relu<T>(const Tensor4<T>&);                            \
  template Tensor4<T> relu_backward<T>(const Tensor4<T>&, const Tensor4<T>&);\
  template Tensor4<T> batchnorm<T>(const Tensor4<T>&, const std::vector<T>&, \
                                   const std::vector<T>&, BnState<T>&,       \
                                   BnMode, BnCache<T>*);                     \
  template BnGrads<T> batchnorm_backward<T>(                                 \
      const std::vector<T>&, const BnCache<T>&, const Tensor4<T>&);          \
  template Tensor4<T> upsample_bilinear2x<T>(const Tensor4<T>&);             \
  template Tensor4<T> upsample_bilinear2x_backward<T>(const Tensor4<T>&);    \
  template Tensor4<T> concat_channels<T>(const Tensor4<T>&,                  \
                                         const Tensor4<T>&);                 \
  template std::pair<Tensor4<T>, Tensor4<T>> split_backward<T>(              \
      const Tensor4<T>&, int);                                               \
  template Tensor4<T> softmax_channels<T>(const Tensor4<T>&);                \
  template CrossEntropyResult<T> weighted_cross_entropy<T>(                  \
      const Tensor4<T>&, const std::vector<LabelMap>&,                       \
      const std::vector<T>&);

LRN_INSTANTIATE_OPS(float)
LRN_INSTANTIATE_OPS(double)

#undef LRN_INSTANTIATE_OPS

}  // namespace lrn
