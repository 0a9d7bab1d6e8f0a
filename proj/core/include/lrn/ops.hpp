#pragma once

#include <utility>
#include <vector>

#include "lrn/labels.hpp"
#include "lrn/tensor.hpp"

// Differentiable kernels the network is composed of. All kernels are pure
// functions of their arguments (batchnorm additionally mutates its explicit
// BnState in train mode). Outputs are bitwise independent of the worker
// count: each output element is produced by one worker with a fixed
// summation order.

namespace lrn {

// Per-channel running statistics plus the fixed momentum/epsilon settings.
template <typename T>
struct BnState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.9);
  T eps = T(1e-5);
};

enum class BnMode { train, infer };

// Written by train-mode batchnorm, consumed by batchnorm_backward.
template <typename T>
struct BnCache {
  Tensor4<T> xhat;           // normalized input
  std::vector<T> inv_std;    // per channel, 1/sqrt(var + eps)
};

template <typename T>
struct Conv3x3Grads {
  Tensor4<T> input;
  Tensor4<T> weight;
  std::vector<T> bias;
};

template <typename T>
struct BnGrads {
  Tensor4<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

template <typename T>
struct CrossEntropyResult {
  double loss = 0.0;
  Tensor4<T> grad_logits;    // gradient w.r.t. pre-softmax logits
};

// 3x3 convolution, stride 1, zero padding 1 (same spatial dims).
// weight dims (cout, cin, 3, 3), bias length cout.
// Rejects non-finite inputs before computing.
template <typename T>
Tensor4<T> conv3x3(const Tensor4<T>& input, const Tensor4<T>& weight,
                   const std::vector<T>& bias);

template <typename T>
Conv3x3Grads<T> conv3x3_backward(const Tensor4<T>& input,
                                 const Tensor4<T>& weight,
                                 const Tensor4<T>& grad_out);

// 2x2 max pooling, stride 2. Spatial dims must be even.
template <typename T>
std::pair<Tensor4<T>, PoolIndices> maxpool2x2(const Tensor4<T>& input);

template <typename T>
Tensor4<T> maxpool2x2_backward(const PoolIndices& idx,
                               const Tensor4<T>& grad_out);

template <typename T>
Tensor4<T> relu(const Tensor4<T>& input);

// Gradient at exactly 0 is defined as 0.
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& input, const Tensor4<T>& grad_out);

// Train mode normalizes per channel by the batch mean and population
// (biased) variance over (n, h, w), then scales/shifts, and folds the batch
// statistics into the running stats with the state's momentum. Infer mode
// normalizes by the running stats and leaves the state untouched.
template <typename T>
Tensor4<T> batchnorm(const Tensor4<T>& input, const std::vector<T>& gamma,
                     const std::vector<T>& beta, BnState<T>& state,
                     BnMode mode, BnCache<T>* cache = nullptr);

template <typename T>
BnGrads<T> batchnorm_backward(const std::vector<T>& gamma,
                              const BnCache<T>& cache,
                              const Tensor4<T>& grad_out);

// 2x bilinear upsampling with half-pixel centers and edge clamping:
// src = (dst + 0.5) / 2 - 0.5, clamped to [0, size-1]. The backward pass is
// the exact transpose, implemented as a gather so it stays race-free.
template <typename T>
Tensor4<T> upsample_bilinear2x(const Tensor4<T>& input);

template <typename T>
Tensor4<T> upsample_bilinear2x_backward(const Tensor4<T>& grad_out);

// Channel concatenation, a's channels first.
template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b);

template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> split_backward(const Tensor4<T>& grad_out,
                                                 int c_a);

// Per-pixel softmax over the channel axis, max-subtracted for stability.
template <typename T>
Tensor4<T> softmax_channels(const Tensor4<T>& logits);

// loss = (1/P) * sum over valid pixels of w[y] * (-ln probs[y]), P = count
// of non-ignored pixels. grad_logits = (w[y]/P) * (probs - onehot(y)) at
// valid pixels, zero at ignored ones. P == 0 yields loss 0 and zero grad.
// probs must come from softmax_channels; target labels must be < C or the
// ignore sentinel.
template <typename T>
CrossEntropyResult<T> weighted_cross_entropy(
    const Tensor4<T>& probs, const std::vector<LabelMap>& target,
    const std::vector<T>& class_weights);

}  // namespace lrn
