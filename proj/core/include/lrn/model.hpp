#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lrn/ops.hpp"

// Encoder-decoder dense labeling model. The encoder halves the spatial dims
// five times; the decoder emits six label maps s1..s6 at doubling
// resolutions, each with C channels, and every stage carries its own
// cross-entropy loss against a resolution-matched ground truth.

namespace lrn {

struct ModelConfig {
  int num_classes = 5;
  int input_h = 64;
  int input_w = 64;
  std::array<int, 5> encoder_channels{16, 32, 64, 64, 64};
  int convs_per_stage = 2;
  float bn_eps = 1e-5f;
  float bn_momentum = 0.9f;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct ConvLayer {
  Tensor4<T> weight;  // (cout, cin, 3, 3)
  std::vector<T> bias;
};

template <typename T>
struct BnLayer {
  std::vector<T> gamma;
  std::vector<T> beta;
  BnState<T> state;
};

template <typename T>
struct EncoderBlock {
  ConvLayer<T> conv;
  BnLayer<T> bn;
};

// One decoder refinement stage: transform the encoder skip feature with
// conv+BN+ReLU down to C channels, concatenate with the upsampled previous
// label map, and fuse with a 3x3 conv back to C channels.
template <typename T>
struct RefineStage {
  ConvLayer<T> skip_conv;
  BnLayer<T> skip_bn;
  ConvLayer<T> fuse;
};

template <typename T>
struct ModelParams {
  std::array<std::vector<EncoderBlock<T>>, 5> encoder;
  ConvLayer<T> head;                    // bottom features -> s1 logits
  std::array<RefineStage<T>, 5> refine; // stages producing s2..s6
};

// Stage predictions plus the encoder skip features retained for backward.
template <typename T>
struct StageOutputs {
  std::array<Tensor4<T>, 6> s;  // s[k-1] = s_k, C channels, input/2^(6-k)
  std::array<Tensor4<T>, 5> f;  // f[k-1] = f_k, pre-pool, input/2^(k-1)
};

template <typename T>
struct EncoderBlockTrace {
  Tensor4<T> conv_in;
  BnCache<T> bn;
  Tensor4<T> relu_in;
};

template <typename T>
struct RefineTrace {
  BnCache<T> skip_bn;
  Tensor4<T> skip_relu_in;
  Tensor4<T> fuse_in;  // concat(upsampled prev, transformed skip)
};

// Intermediates retained by a train-mode forward, consumed by
// model_backward.
template <typename T>
struct ForwardTrace {
  std::array<std::vector<EncoderBlockTrace<T>>, 5> enc;
  std::array<PoolIndices, 5> pool;
  Tensor4<T> bottom;
  std::array<RefineTrace<T>, 5> refine;
  bool valid = false;
};

template <typename T>
struct TotalLoss {
  double total = 0.0;
  std::array<double, 6> per_stage{};
  std::array<Tensor4<T>, 6> stage_grads;  // d loss / d s_k logits
};

// Conv weights ~ Normal(0, sqrt(2/fan_in)) from the seeded PRNG, biases 0,
// BN gamma 1 / beta 0, running stats (0, 1).
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

// Same shapes as `like`, all learnable values and running stats zeroed.
template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& like);

// Stage k of the encoder is (conv3x3 -> BN -> ReLU) x convs_per_stage
// followed by 2x2 max pooling; f[k] taps the pre-pool activations of the
// stage's last block. Returns the skips and the post-pool bottom feature
// map at 1/32 resolution.
template <typename T>
std::pair<std::array<Tensor4<T>, 5>, Tensor4<T>> encoder_forward(
    const ModelConfig& cfg, ModelParams<T>& params, const Tensor4<T>& image,
    BnMode mode, ForwardTrace<T>* trace = nullptr);

// s_prev must have C channels at half the spatial dims of f_skip.
template <typename T>
Tensor4<T> refine_stage(const ModelConfig& cfg, RefineStage<T>& stage,
                        const Tensor4<T>& s_prev, const Tensor4<T>& f_skip,
                        BnMode mode, RefineTrace<T>* trace = nullptr);

template <typename T>
StageOutputs<T> model_forward(const ModelConfig& cfg, ModelParams<T>& params,
                              const Tensor4<T>& image, BnMode mode,
                              ForwardTrace<T>* trace = nullptr);

// Nearest-neighbor label subsampling to every stage resolution
// (source pixel = floor((dst + 0.5) * scale)); R6 equals the input.
std::array<std::vector<LabelMap>, 6> downsampled_targets(
    const std::vector<LabelMap>& gt, const ModelConfig& cfg);

// Sum of the six per-stage weighted cross-entropy losses, in stage order.
template <typename T>
TotalLoss<T> total_loss(const StageOutputs<T>& stages,
                        const std::array<std::vector<LabelMap>, 6>& targets,
                        const std::vector<T>& class_weights);

// Gradient of the total loss w.r.t. every parameter. Contributions from all
// six stage losses accumulate additively into shared encoder parameters.
template <typename T>
ModelParams<T> model_backward(const ModelConfig& cfg,
                              const ModelParams<T>& params,
                              const StageOutputs<T>& stages,
                              const ForwardTrace<T>& trace,
                              const std::array<Tensor4<T>, 6>& stage_grads);

// ------------------------------------------------------- parameter access

enum class ParamKind { conv_weight, bias, bn_gamma, bn_beta };

// Flat view of one learnable blob (or running statistic) for optimizers,
// checkpointing and gradient checks.
template <typename T>
struct ParamRef {
  std::string name;
  ParamKind kind = ParamKind::conv_weight;
  T* data = nullptr;
  std::int64_t size = 0;
  int rank = 1;
  std::array<int, 4> dims{};
};

// Fixed traversal order: encoder stages 1..5 block by block, head, then
// decoder stages 2..6.
template <typename T>
std::vector<ParamRef<T>> learnable_params(ModelParams<T>& params);

// BN running_mean/running_var blobs, same traversal order.
template <typename T>
std::vector<ParamRef<T>> bn_running_stats(ModelParams<T>& params);

}  // namespace lrn
