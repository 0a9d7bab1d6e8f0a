#include "lrn/model.hpp"

#include <cmath>
#include <random>

#include "lrn/parallel.hpp"

namespace lrn {

void ModelConfig::validate() const {
  if (num_classes < 2)
    throw dim_error("num_classes must be >= 2, got " +
                    std::to_string(num_classes));
  if (input_h % 32 != 0 || input_w % 32 != 0 || input_h < 32 || input_w < 32)
    throw dim_error("input size must be a positive multiple of 32, got " +
                    std::to_string(input_h) + "x" + std::to_string(input_w));
  for (int c : encoder_channels)
    if (c < 1) throw dim_error("encoder channel counts must be >= 1");
  if (convs_per_stage < 1)
    throw dim_error("convs_per_stage must be >= 1");
  if (bn_eps <= 0.f) throw dim_error("bn_eps must be > 0");
}

namespace {

template <typename T>
void add_inplace(Tensor4<T>& a, const Tensor4<T>& b) {
  if (!(a.dims == b.dims)) throw dim_error("add_inplace dims mismatch");
  parallel_for(a.size(), [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) a.data[i] += b.data[i];
  });
}

template <typename T>
void add_inplace(std::vector<T>& a, const std::vector<T>& b) {
  if (a.size() != b.size()) throw dim_error("add_inplace size mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

template <typename T>
ConvLayer<T> make_conv(int cout, int cin, std::mt19937_64& rng) {
  ConvLayer<T> layer;
  layer.weight = Tensor4<T>(cout, cin, 3, 3);
  const double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * 9.0));
  std::normal_distribution<double> dist(0.0, stddev);
  for (T& v : layer.weight.data) v = static_cast<T>(dist(rng));
  layer.bias.assign(cout, T(0));
  return layer;
}

template <typename T>
BnLayer<T> make_bn(int channels, const ModelConfig& cfg) {
  BnLayer<T> layer;
  layer.gamma.assign(channels, T(1));
  layer.beta.assign(channels, T(0));
  layer.state.running_mean.assign(channels, T(0));
  layer.state.running_var.assign(channels, T(1));
  layer.state.momentum = static_cast<T>(cfg.bn_momentum);
  layer.state.eps = static_cast<T>(cfg.bn_eps);
  return layer;
}

}  // namespace

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelParams<T> p;

  int in_ch = 3;
  for (int s = 0; s < 5; ++s) {
    const int ch = cfg.encoder_channels[s];
    p.encoder[s].clear();
    for (int b = 0; b < cfg.convs_per_stage; ++b) {
      EncoderBlock<T> block;
      block.conv = make_conv<T>(ch, b == 0 ? in_ch : ch, rng);
      block.bn = make_bn<T>(ch, cfg);
      p.encoder[s].push_back(std::move(block));
    }
    in_ch = ch;
  }

  const int c = cfg.num_classes;
  p.head = make_conv<T>(c, cfg.encoder_channels[4], rng);

  for (int k = 0; k < 5; ++k) {
    // decoder stage k+2 consumes skip f_{7-(k+2)} = f_{5-k}
    const int skip_ch = cfg.encoder_channels[4 - k];
    p.refine[k].skip_conv = make_conv<T>(c, skip_ch, rng);
    p.refine[k].skip_bn = make_bn<T>(c, cfg);
    p.refine[k].fuse = make_conv<T>(c, 2 * c, rng);
  }
  return p;
}

template <typename T>
ModelParams<T> zeros_like(const ModelParams<T>& like) {
  ModelParams<T> z;
  for (int s = 0; s < 5; ++s) {
    for (const EncoderBlock<T>& b : like.encoder[s]) {
      EncoderBlock<T> nb;
      nb.conv.weight = Tensor4<T>(b.conv.weight.dims);
      nb.conv.bias.assign(b.conv.bias.size(), T(0));
      nb.bn.gamma.assign(b.bn.gamma.size(), T(0));
      nb.bn.beta.assign(b.bn.beta.size(), T(0));
      nb.bn.state.running_mean.assign(b.bn.state.running_mean.size(), T(0));
      nb.bn.state.running_var.assign(b.bn.state.running_var.size(), T(0));
      nb.bn.state.momentum = b.bn.state.momentum;
      nb.bn.state.eps = b.bn.state.eps;
      z.encoder[s].push_back(std::move(nb));
    }
  }
  z.head.weight = Tensor4<T>(like.head.weight.dims);
  z.head.bias.assign(like.head.bias.size(), T(0));
  for (int k = 0; k < 5; ++k) {
    const RefineStage<T>& r = like.refine[k];
    RefineStage<T>& n = z.refine[k];
    n.skip_conv.weight = Tensor4<T>(r.skip_conv.weight.dims);
    n.skip_conv.bias.assign(r.skip_conv.bias.size(), T(0));
    n.skip_bn.gamma.assign(r.skip_bn.gamma.size(), T(0));
    n.skip_bn.beta.assign(r.skip_bn.beta.size(), T(0));
    n.skip_bn.state.running_mean.assign(r.skip_bn.state.running_mean.size(),
                                        T(0));
    n.skip_bn.state.running_var.assign(r.skip_bn.state.running_var.size(),
                                       T(0));
    n.skip_bn.state.momentum = r.skip_bn.state.momentum;
    n.skip_bn.state.eps = r.skip_bn.state.eps;
    n.fuse.weight = Tensor4<T>(r.fuse.weight.dims);
    n.fuse.bias.assign(r.fuse.bias.size(), T(0));
  }
  return z;
}

// ----------------------------------------------------------------- forward

template <typename T>
std::pair<std::array<Tensor4<T>, 5>, Tensor4<T>> encoder_forward(
    const ModelConfig& cfg, ModelParams<T>& params, const Tensor4<T>& image,
    BnMode mode, ForwardTrace<T>* trace) {
  if (image.dims.c != 3)
    throw dim_error("encoder input must have 3 channels, got " +
                    to_string(image.dims));
  if (image.dims.h != cfg.input_h || image.dims.w != cfg.input_w)
    throw dim_error("encoder input " + to_string(image.dims) +
                    " does not match configured size " +
                    std::to_string(cfg.input_h) + "x" +
                    std::to_string(cfg.input_w));

  std::array<Tensor4<T>, 5> f;
  Tensor4<T> x = image;
  for (int s = 0; s < 5; ++s) {
    if (trace) trace->enc[s].resize(params.encoder[s].size());
    for (std::size_t b = 0; b < params.encoder[s].size(); ++b) {
      EncoderBlock<T>& block = params.encoder[s][b];
      EncoderBlockTrace<T>* bt = trace ? &trace->enc[s][b] : nullptr;
      if (bt) bt->conv_in = x;
      Tensor4<T> z = conv3x3(x, block.conv.weight, block.conv.bias);
      z = batchnorm(z, block.bn.gamma, block.bn.beta, block.bn.state, mode,
                    bt ? &bt->bn : nullptr);
      if (bt) bt->relu_in = z;
      x = relu(z);
    }
    f[s] = x;
    auto [pooled, idx] = maxpool2x2(x);
    if (trace) trace->pool[s] = std::move(idx);
    x = std::move(pooled);
  }
  return {std::move(f), std::move(x)};
}

template <typename T>
Tensor4<T> refine_stage(const ModelConfig& cfg, RefineStage<T>& stage,
                        const Tensor4<T>& s_prev, const Tensor4<T>& f_skip,
                        BnMode mode, RefineTrace<T>* trace) {
  if (s_prev.dims.c != cfg.num_classes)
    throw dim_error("refine_stage: previous map has " +
                    std::to_string(s_prev.dims.c) + " channels, expected " +
                    std::to_string(cfg.num_classes));
  Tensor4<T> up = upsample_bilinear2x(s_prev);
  Tensor4<T> m = conv3x3(f_skip, stage.skip_conv.weight, stage.skip_conv.bias);
  m = batchnorm(m, stage.skip_bn.gamma, stage.skip_bn.beta,
                stage.skip_bn.state, mode, trace ? &trace->skip_bn : nullptr);
  if (trace) trace->skip_relu_in = m;
  m = relu(m);
  Tensor4<T> cat = concat_channels(up, m);  // throws if dims disagree
  if (trace) trace->fuse_in = cat;
  return conv3x3(cat, stage.fuse.weight, stage.fuse.bias);
}

template <typename T>
StageOutputs<T> model_forward(const ModelConfig& cfg, ModelParams<T>& params,
                              const Tensor4<T>& image, BnMode mode,
                              ForwardTrace<T>* trace) {
  StageOutputs<T> out;
  auto [f, bottom] = encoder_forward(cfg, params, image, mode, trace);
  out.f = std::move(f);
  if (trace) trace->bottom = bottom;
  out.s[0] = conv3x3(bottom, params.head.weight, params.head.bias);
  for (int k = 2; k <= 6; ++k) {
    out.s[k - 1] = refine_stage(cfg, params.refine[k - 2], out.s[k - 2],
                                out.f[6 - k], mode,
                                trace ? &trace->refine[k - 2] : nullptr);
  }
  if (trace) trace->valid = true;
  return out;
}

// ------------------------------------------------------------------ labels

std::array<std::vector<LabelMap>, 6> downsampled_targets(
    const std::vector<LabelMap>& gt, const ModelConfig& cfg) {
  std::array<std::vector<LabelMap>, 6> out;
  for (const LabelMap& lm : gt)
    if (lm.h != cfg.input_h || lm.w != cfg.input_w)
      throw dim_error("ground truth dims do not match configured input size");

  for (int k = 1; k <= 6; ++k) {
    const int scale = 1 << (6 - k);
    out[k - 1].reserve(gt.size());
    for (const LabelMap& lm : gt) {
      if (scale == 1) {
        out[k - 1].push_back(lm);
        continue;
      }
      LabelMap small(lm.h / scale, lm.w / scale);
      for (int y = 0; y < small.h; ++y) {
        const int sy = y * scale + scale / 2;
        for (int x = 0; x < small.w; ++x)
          small.at(y, x) = lm.at(sy, x * scale + scale / 2);
      }
      out[k - 1].push_back(std::move(small));
    }
  }
  return out;
}

template <typename T>
TotalLoss<T> total_loss(const StageOutputs<T>& stages,
                        const std::array<std::vector<LabelMap>, 6>& targets,
                        const std::vector<T>& class_weights) {
  TotalLoss<T> res;
  for (int k = 0; k < 6; ++k) {
    Tensor4<T> probs = softmax_channels(stages.s[k]);
    CrossEntropyResult<T> ce =
        weighted_cross_entropy(probs, targets[k], class_weights);
    res.per_stage[k] = ce.loss;
    res.stage_grads[k] = std::move(ce.grad_logits);
    res.total += ce.loss;
  }
  return res;
}

// ---------------------------------------------------------------- backward

template <typename T>
ModelParams<T> model_backward(const ModelConfig& cfg,
                              const ModelParams<T>& params,
                              const StageOutputs<T>& stages,
                              const ForwardTrace<T>& trace,
                              const std::array<Tensor4<T>, 6>& stage_grads) {
  if (!trace.valid)
    throw usage_error("model_backward requires the trace of a train-mode "
                      "forward pass");
  ModelParams<T> grads = zeros_like(params);
  const int c = cfg.num_classes;

  std::array<Tensor4<T>, 5> f_grad;
  for (int i = 0; i < 5; ++i) f_grad[i] = Tensor4<T>(stages.f[i].dims);

  // Decoder stages 6..2. `g` carries the accumulated gradient at s_k.
  Tensor4<T> g = stage_grads[5];
  for (int k = 6; k >= 2; --k) {
    const RefineStage<T>& rp = params.refine[k - 2];
    RefineStage<T>& rg = grads.refine[k - 2];
    const RefineTrace<T>& rt = trace.refine[k - 2];

    Conv3x3Grads<T> fuse = conv3x3_backward(rt.fuse_in, rp.fuse.weight, g);
    add_inplace(rg.fuse.weight, fuse.weight);
    add_inplace(rg.fuse.bias, fuse.bias);

    auto [gu, gm] = split_backward(fuse.input, c);

    Tensor4<T> gr = relu_backward(rt.skip_relu_in, gm);
    BnGrads<T> bn = batchnorm_backward(rp.skip_bn.gamma, rt.skip_bn, gr);
    add_inplace(rg.skip_bn.gamma, bn.gamma);
    add_inplace(rg.skip_bn.beta, bn.beta);

    Conv3x3Grads<T> skip =
        conv3x3_backward(stages.f[6 - k], rp.skip_conv.weight, bn.input);
    add_inplace(rg.skip_conv.weight, skip.weight);
    add_inplace(rg.skip_conv.bias, skip.bias);
    add_inplace(f_grad[6 - k], skip.input);

    Tensor4<T> gprev = upsample_bilinear2x_backward(gu);
    add_inplace(gprev, stage_grads[k - 2]);
    g = std::move(gprev);
  }

  // Head conv: s1 = conv3x3(bottom).
  Conv3x3Grads<T> head = conv3x3_backward(trace.bottom, params.head.weight, g);
  add_inplace(grads.head.weight, head.weight);
  add_inplace(grads.head.bias, head.bias);

  // Encoder stages 5..1: gradient enters through the pooled output and the
  // skip tap of each stage.
  Tensor4<T> g_pool = std::move(head.input);
  for (int s = 5; s >= 1; --s) {
    Tensor4<T> gf = maxpool2x2_backward(trace.pool[s - 1], g_pool);
    add_inplace(gf, f_grad[s - 1]);
    for (int b = static_cast<int>(params.encoder[s - 1].size()) - 1; b >= 0;
         --b) {
      const EncoderBlock<T>& bp = params.encoder[s - 1][b];
      EncoderBlock<T>& bg = grads.encoder[s - 1][b];
      const EncoderBlockTrace<T>& bt = trace.enc[s - 1][b];

      Tensor4<T> gr = relu_backward(bt.relu_in, gf);
      BnGrads<T> bn = batchnorm_backward(bp.bn.gamma, bt.bn, gr);
      add_inplace(bg.bn.gamma, bn.gamma);
      add_inplace(bg.bn.beta, bn.beta);
      Conv3x3Grads<T> cv =
          conv3x3_backward(bt.conv_in, bp.conv.weight, bn.input);
      add_inplace(bg.conv.weight, cv.weight);
      add_inplace(bg.conv.bias, cv.bias);
      gf = std::move(cv.input);
    }
    g_pool = std::move(gf);
  }
  return grads;
}

// --------------------------------------------------------- parameter views

namespace {

template <typename T>
ParamRef<T> tensor_ref(const std::string& name, ParamKind kind,
                       Tensor4<T>& t) {
  ParamRef<T> r;
  r.name = name;
  r.kind = kind;
  r.data = t.data.data();
  r.size = t.size();
  r.rank = 4;
  r.dims = {t.dims.n, t.dims.c, t.dims.h, t.dims.w};
  return r;
}

template <typename T>
ParamRef<T> vector_ref(const std::string& name, ParamKind kind,
                       std::vector<T>& v) {
  ParamRef<T> r;
  r.name = name;
  r.kind = kind;
  r.data = v.data();
  r.size = static_cast<std::int64_t>(v.size());
  r.rank = 1;
  r.dims = {static_cast<int>(v.size()), 0, 0, 0};
  return r;
}

}  // namespace

template <typename T>
std::vector<ParamRef<T>> learnable_params(ModelParams<T>& params) {
  std::vector<ParamRef<T>> refs;
  for (int s = 0; s < 5; ++s) {
    for (std::size_t b = 0; b < params.encoder[s].size(); ++b) {
      EncoderBlock<T>& blk = params.encoder[s][b];
      const std::string base =
          "enc." + std::to_string(s + 1) + "." + std::to_string(b + 1);
      refs.push_back(tensor_ref(base + ".conv.weight", ParamKind::conv_weight,
                                blk.conv.weight));
      refs.push_back(vector_ref(base + ".conv.bias", ParamKind::bias,
                                blk.conv.bias));
      refs.push_back(vector_ref(base + ".bn.gamma", ParamKind::bn_gamma,
                                blk.bn.gamma));
      refs.push_back(vector_ref(base + ".bn.beta", ParamKind::bn_beta,
                                blk.bn.beta));
    }
  }
  refs.push_back(tensor_ref<T>("head.weight", ParamKind::conv_weight,
                               params.head.weight));
  refs.push_back(vector_ref<T>("head.bias", ParamKind::bias,
                               params.head.bias));
  for (int k = 0; k < 5; ++k) {
    RefineStage<T>& st = params.refine[k];
    const std::string base = "dec." + std::to_string(k + 2);
    refs.push_back(tensor_ref(base + ".skip.conv.weight",
                              ParamKind::conv_weight, st.skip_conv.weight));
    refs.push_back(vector_ref(base + ".skip.conv.bias", ParamKind::bias,
                              st.skip_conv.bias));
    refs.push_back(vector_ref(base + ".skip.bn.gamma", ParamKind::bn_gamma,
                              st.skip_bn.gamma));
    refs.push_back(vector_ref(base + ".skip.bn.beta", ParamKind::bn_beta,
                              st.skip_bn.beta));
    refs.push_back(tensor_ref(base + ".fuse.weight", ParamKind::conv_weight,
                              st.fuse.weight));
    refs.push_back(vector_ref(base + ".fuse.bias", ParamKind::bias,
                              st.fuse.bias));
  }
  return refs;
}

template <typename T>
std::vector<ParamRef<T>> bn_running_stats(ModelParams<T>& params) {
  std::vector<ParamRef<T>> refs;
  for (int s = 0; s < 5; ++s) {
    for (std::size_t b = 0; b < params.encoder[s].size(); ++b) {
      BnLayer<T>& bn = params.encoder[s][b].bn;
      const std::string base = "enc." + std::to_string(s + 1) + "." +
                               std::to_string(b + 1) + ".bn";
      refs.push_back(vector_ref(base + ".running_mean", ParamKind::bias,
                                bn.state.running_mean));
      refs.push_back(vector_ref(base + ".running_var", ParamKind::bias,
                                bn.state.running_var));
    }
  }
  for (int k = 0; k < 5; ++k) {
    BnLayer<T>& bn = params.refine[k].skip_bn;
    const std::string base = "dec." + std::to_string(k + 2) + ".skip.bn";
    refs.push_back(vector_ref(base + ".running_mean", ParamKind::bias,
                              bn.state.running_mean));
    refs.push_back(vector_ref(base + ".running_var", ParamKind::bias,
                              bn.state.running_var));
  }
  return refs;
}

// ---------------------------------------------------------- instantiations

#define LRN_INSTANTIATE_MODEL(T)                                             \
  template ModelParams<T> init_params<T>(const ModelConfig&, std::uint64_t); \
  template ModelParams<T> zeros_like<T>(const ModelParams<T>&);              \
  template std::pair<std::array<Tensor4<T>, 5>, Tensor4<T>>                  \
  encoder_forward<T>(const ModelConfig&, ModelParams<T>&, const Tensor4<T>&, \
                     BnMode, ForwardTrace<T>*);                              \
  template Tensor4<T> refine_stage<T>(const ModelConfig&, RefineStage<T>&,   \
                                      const Tensor4<T>&, const Tensor4<T>&,  \
                                      BnMode, RefineTrace<T>*);              \
  template StageOutputs<T> model_forward<T>(const ModelConfig&,              \
                                            ModelParams<T>&,                 \
                                            const Tensor4<T>&, BnMode,       \
                                            ForwardTrace<T>*);               \
  template TotalLoss<T> total_loss<T>(                                       \
      const StageOutputs<T>&, const std::array<std::vector<LabelMap>, 6>&,   \
      const std::vector<T>&);                                                \
  template ModelParams<T> model_backward<T>(                                 \
      const ModelConfig&, const ModelParams<T>&, const StageOutputs<T>&,     \
      const ForwardTrace<T>&, const std::array<Tensor4<T>, 6>&);             \
  template std::vector<ParamRef<T>> learnable_params<T>(ModelParams<T>&);    \
  template std::vector<ParamRef<T>> bn_running_stats<T>(ModelParams<T>&);

LRN_INSTANTIATE_MODEL(float)
LRN_INSTANTIATE_MODEL(double)

#undef LRN_INSTANTIATE_MODEL

}  // namespace lrn
