#include <random>

#include "doctest.h"
#include "lrn/model.hpp"
#include "test_util.hpp"

using namespace lrn;
using namespace lrn::test;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.input_h = cfg.input_w = 32;
  cfg.encoder_channels = {2, 2, 2, 2, 2};
  cfg.convs_per_stage = 1;
  return cfg;
}

ModelConfig desk_config() {
  ModelConfig cfg;  // the defaults
  return cfg;
}

std::vector<LabelMap> random_labels(std::mt19937_64& rng, int n, int h, int w,
                                    int num_classes) {
  std::vector<LabelMap> maps;
  for (int i = 0; i < n; ++i) {
    LabelMap lm(h, w);
    for (std::uint8_t& v : lm.v)
      v = static_cast<std::uint8_t>(rng() % unsigned(num_classes));
    maps.push_back(std::move(lm));
  }
  return maps;
}

}  // namespace

// ------------------------------------------------------------- init_params

TEST_CASE("init_params is deterministic and follows the stated contract") {
  const ModelConfig cfg = desk_config();
  ModelParams<float> a = init_params<float>(cfg, 42);
  ModelParams<float> b = init_params<float>(cfg, 42);
  auto ra = learnable_params(a), rb = learnable_params(b);
  REQUIRE(ra.size() == rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    REQUIRE(ra[i].size == rb[i].size);
    for (std::int64_t t = 0; t < ra[i].size; ++t)
      REQUIRE(ra[i].data[t] == rb[i].data[t]);
  }

  for (const auto& r : ra) {
    if (r.kind == ParamKind::bias || r.kind == ParamKind::bn_beta)
      for (std::int64_t t = 0; t < r.size; ++t) CHECK(r.data[t] == 0.f);
    if (r.kind == ParamKind::bn_gamma)
      for (std::int64_t t = 0; t < r.size; ++t) CHECK(r.data[t] == 1.f);
  }

  ModelParams<float> c = init_params<float>(cfg, 43);
  CHECK(c.head.weight.data != a.head.weight.data);
}

TEST_CASE("init_params kernel variance approximates 2/fan_in") {
  ModelConfig cfg = desk_config();
  cfg.encoder_channels = {16, 64, 64, 64, 64};  // stage-2 kernel is 64x16x3x3
  ModelParams<float> p = init_params<float>(cfg, 7);
  const Tensor4f& k = p.encoder[1][0].conv.weight;
  REQUIRE(k.dims == Dims4{64, 16, 3, 3});
  double mean = 0.0;
  for (float v : k.data) mean += v;
  mean /= double(k.size());
  double var = 0.0;
  for (float v : k.data) var += (v - mean) * (v - mean);
  var /= double(k.size());
  const double expect = 2.0 / (16.0 * 9.0);
  CHECK(var > 0.7 * expect);
  CHECK(var < 1.3 * expect);
}

// --------------------------------------------------------------- encoder

TEST_CASE("encoder_forward produces the documented pyramid") {
  const ModelConfig cfg = desk_config();
  ModelParams<float> p = init_params<float>(cfg, 1);
  std::mt19937_64 rng(2);
  Tensor4f img = random_tensor<float>(rng, 1, 3, 64, 64);
  auto [f, bottom] = encoder_forward(cfg, p, img, BnMode::infer);

  const int expect_hw[5] = {64, 32, 16, 8, 4};
  for (int k = 0; k < 5; ++k) {
    CHECK(f[k].dims.h == expect_hw[k]);
    CHECK(f[k].dims.w == expect_hw[k]);
    CHECK(f[k].dims.c == cfg.encoder_channels[k]);
  }
  CHECK(bottom.dims == Dims4{1, cfg.encoder_channels[4], 2, 2});

  Tensor4f bad = random_tensor<float>(rng, 1, 3, 32, 64);
  CHECK_THROWS_AS(encoder_forward(cfg, p, bad, BnMode::infer), dim_error);
}

TEST_CASE("zero image with zero biases and beta gives a zero bottom") {
  const ModelConfig cfg = desk_config();
  ModelParams<float> p = init_params<float>(cfg, 3);
  Tensor4f img(1, 3, 64, 64);
  auto [f, bottom] = encoder_forward(cfg, p, img, BnMode::train);
  for (float v : bottom.data) CHECK(v == 0.f);
}

// ------------------------------------------------------------ refine_stage

TEST_CASE("refine_stage shape contract") {
  ModelConfig cfg = desk_config();
  std::mt19937_64 rng(4);
  ModelParams<float> p = init_params<float>(cfg, 4);
  // stage k=6 consumes f1 (64 channels at 4x the coarse map in desk config)
  Tensor4f s_prev = random_tensor<float>(rng, 1, cfg.num_classes, 2, 2);
  Tensor4f f_skip = random_tensor<float>(rng, 1, cfg.encoder_channels[4], 4, 4);
  Tensor4f out = refine_stage(cfg, p.refine[0], s_prev, f_skip, BnMode::infer);
  CHECK(out.dims == Dims4{1, cfg.num_classes, 4, 4});

  Tensor4f wrong = random_tensor<float>(rng, 1, cfg.encoder_channels[4], 8, 8);
  CHECK_THROWS_AS(refine_stage(cfg, p.refine[0], s_prev, wrong, BnMode::infer),
                  dim_error);
}

TEST_CASE("refine_stage zero everything stays zero") {
  ModelConfig cfg = desk_config();
  ModelParams<float> p = init_params<float>(cfg, 5);
  RefineStage<float>& st = p.refine[0];
  st.skip_conv.weight.fill(0.f);
  st.fuse.weight.fill(0.f);
  Tensor4f s_prev(1, cfg.num_classes, 2, 2);
  Tensor4f f_skip(1, cfg.encoder_channels[4], 4, 4);
  Tensor4f out = refine_stage(cfg, st, s_prev, f_skip, BnMode::train);
  for (float v : out.data) CHECK(v == 0.f);
}

TEST_CASE("refine_stage wiring: identity fuse conv recovers the upsample") {
  // skip transform zeroed, fuse conv = identity on the upsampled half:
  // center tap 1 on matching u-channel, 0 on m-channels.
  ModelConfig cfg = desk_config();
  const int c = cfg.num_classes;
  ModelParams<float> p = init_params<float>(cfg, 6);
  RefineStage<float>& st = p.refine[0];
  st.skip_conv.weight.fill(0.f);
  std::fill(st.skip_conv.bias.begin(), st.skip_conv.bias.end(), 0.f);
  std::fill(st.skip_bn.beta.begin(), st.skip_bn.beta.end(), 0.f);
  st.fuse.weight.fill(0.f);
  std::fill(st.fuse.bias.begin(), st.fuse.bias.end(), 0.f);
  for (int o = 0; o < c; ++o) st.fuse.weight.at(o, o, 1, 1) = 1.f;

  std::mt19937_64 rng(7);
  Tensor4f s_prev = random_tensor<float>(rng, 2, c, 2, 2);
  Tensor4f f_skip = random_tensor<float>(rng, 2, cfg.encoder_channels[4], 4, 4);
  Tensor4f out = refine_stage(cfg, st, s_prev, f_skip, BnMode::train);
  check_bitwise(out, upsample_bilinear2x(s_prev));
}

// ----------------------------------------------------------- model_forward

TEST_CASE("model_forward emits the six-stage pyramid for 64x64 input") {
  const ModelConfig cfg = desk_config();
  ModelParams<float> p = init_params<float>(cfg, 8);
  std::mt19937_64 rng(8);
  Tensor4f img = random_tensor<float>(rng, 2, 3, 64, 64);
  StageOutputs<float> out = model_forward(cfg, p, img, BnMode::infer);
  const int expect[6] = {2, 4, 8, 16, 32, 64};
  for (int k = 0; k < 6; ++k) {
    CHECK(out.s[k].dims.n == 2);
    CHECK(out.s[k].dims.c == cfg.num_classes);
    CHECK(out.s[k].dims.h == expect[k]);
    CHECK(out.s[k].dims.w == expect[k]);
  }
}

TEST_CASE("model_forward batch-2 equals stacked batch-1 at inference") {
  const ModelConfig cfg = tiny_config();
  ModelParams<float> p = init_params<float>(cfg, 9);
  std::mt19937_64 rng(9);
  Tensor4f both = random_tensor<float>(rng, 2, 3, 32, 32);
  Tensor4f one(1, 3, 32, 32), two(1, 3, 32, 32);
  std::copy_n(both.data.begin(), one.size(), one.data.begin());
  std::copy_n(both.data.begin() + one.size(), two.size(), two.data.begin());

  StageOutputs<float> o_both = model_forward(cfg, p, both, BnMode::infer);
  StageOutputs<float> o_one = model_forward(cfg, p, one, BnMode::infer);
  StageOutputs<float> o_two = model_forward(cfg, p, two, BnMode::infer);
  for (int k = 0; k < 6; ++k) {
    const std::int64_t half = o_one.s[k].size();
    for (std::int64_t t = 0; t < half; ++t) {
      CHECK(o_both.s[k].data[t] ==
            doctest::Approx(o_one.s[k].data[t]).epsilon(1e-5));
      CHECK(o_both.s[k].data[half + t] ==
            doctest::Approx(o_two.s[k].data[t]).epsilon(1e-5));
    }
  }
}

TEST_CASE("model_forward is bitwise deterministic") {
  const ModelConfig cfg = tiny_config();
  ModelParams<float> p = init_params<float>(cfg, 10);
  std::mt19937_64 rng(10);
  Tensor4f img = random_tensor<float>(rng, 1, 3, 32, 32);
  ModelParams<float> p2 = p;
  StageOutputs<float> a = model_forward(cfg, p, img, BnMode::train);
  StageOutputs<float> b = model_forward(cfg, p2, img, BnMode::train);
  for (int k = 0; k < 6; ++k) check_bitwise(a.s[k], b.s[k]);
}

// ----------------------------------------------------- downsampled_targets

TEST_CASE("downsampled_targets block centers and identity at full scale") {
  ModelConfig cfg = desk_config();
  cfg.input_h = cfg.input_w = 64;

  std::vector<LabelMap> gt(1, LabelMap(64, 64));
  // four 32x32 uniform quadrants A=0 B=1 C=2 D=3
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      gt[0].at(y, x) =
          static_cast<std::uint8_t>((y >= 32 ? 2 : 0) + (x >= 32 ? 1 : 0));

  const auto targets = downsampled_targets(gt, cfg);
  CHECK(targets[5][0] == gt[0]);  // R6 identical
  const LabelMap& r1 = targets[0][0];
  REQUIRE(r1.h == 2);
  REQUIRE(r1.w == 2);
  CHECK(r1.at(0, 0) == 0);
  CHECK(r1.at(0, 1) == 1);
  CHECK(r1.at(1, 0) == 2);
  CHECK(r1.at(1, 1) == 3);

  std::vector<LabelMap> constant(2, LabelMap(64, 64, 4));
  const auto ct = downsampled_targets(constant, cfg);
  for (int k = 0; k < 6; ++k)
    for (const LabelMap& lm : ct[k])
      for (std::uint8_t v : lm.v) CHECK(v == 4);
}

TEST_CASE("downsampled_targets preserves the ignore sentinel") {
  ModelConfig cfg = desk_config();
  cfg.input_h = cfg.input_w = 32;
  std::vector<LabelMap> gt(1, LabelMap(32, 32, kIgnoreLabel));
  const auto targets = downsampled_targets(gt, cfg);
  for (int k = 0; k < 6; ++k)
    for (std::uint8_t v : targets[k][0].v) CHECK(v == kIgnoreLabel);
}

// -------------------------------------------------------------- total_loss

TEST_CASE("total_loss equals the bitwise sum of stage losses") {
  const ModelConfig cfg = tiny_config();
  ModelParams<float> p = init_params<float>(cfg, 11);
  std::mt19937_64 rng(11);
  const std::vector<float> w(cfg.num_classes, 1.f);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor4f img = random_tensor<float>(rng, 1, 3, 32, 32);
    const auto gt = random_labels(rng, 1, 32, 32, cfg.num_classes);
    const auto targets = downsampled_targets(gt, cfg);
    StageOutputs<float> out = model_forward(cfg, p, img, BnMode::infer);
    TotalLoss<float> tl = total_loss(out, targets, w);
    double sum = 0.0;
    for (int k = 0; k < 6; ++k) sum += tl.per_stage[k];
    CHECK(tl.total == sum);
  }
}

TEST_CASE("total_loss of uniform logits is 6 ln C") {
  const ModelConfig cfg = tiny_config();
  std::mt19937_64 rng(12);
  StageOutputs<float> out;
  for (int k = 0; k < 6; ++k) {
    const int hw = 1 << k;
    out.s[k] = Tensor4f(1, cfg.num_classes, hw, hw);  // zeros -> uniform
  }
  std::vector<LabelMap> gt(1, LabelMap(32, 32));
  for (std::uint8_t& v : gt[0].v)
    v = static_cast<std::uint8_t>(rng() % unsigned(cfg.num_classes));
  auto targets = downsampled_targets(gt, cfg);
  TotalLoss<float> tl =
      total_loss(out, targets, std::vector<float>(cfg.num_classes, 1.f));
  CHECK(tl.total ==
        doctest::Approx(6.0 * std::log(double(cfg.num_classes))).epsilon(1e-9));
}

TEST_CASE("total_loss saturates to ~0 when logits favor the truth") {
  const ModelConfig cfg = tiny_config();
  std::mt19937_64 rng(13);
  std::vector<LabelMap> gt = random_labels(rng, 1, 32, 32, cfg.num_classes);
  auto targets = downsampled_targets(gt, cfg);
  StageOutputs<float> out;
  for (int k = 0; k < 6; ++k) {
    const int hw = 1 << k;
    out.s[k] = Tensor4f(1, cfg.num_classes, hw, hw);
    for (int y = 0; y < hw; ++y)
      for (int x = 0; x < hw; ++x)
        out.s[k].at(0, targets[k][0].at(y, x), y, x) = 25.f;  // margin >= 20
  }
  TotalLoss<float> tl =
      total_loss(out, targets, std::vector<float>(cfg.num_classes, 1.f));
  CHECK(tl.total < 1e-6);
}

// ---------------------------------------------------------- model_backward

TEST_CASE("model_backward zero stage grads give zero parameter grads") {
  const ModelConfig cfg = tiny_config();
  ModelParams<float> p = init_params<float>(cfg, 14);
  std::mt19937_64 rng(14);
  Tensor4f img = random_tensor<float>(rng, 1, 3, 32, 32);
  ForwardTrace<float> trace;
  StageOutputs<float> out = model_forward(cfg, p, img, BnMode::train, &trace);
  std::array<Tensor4f, 6> zero_grads;
  for (int k = 0; k < 6; ++k) zero_grads[k] = Tensor4f(out.s[k].dims);
  ModelParams<float> g = model_backward(cfg, p, out, trace, zero_grads);
  for (const auto& r : learnable_params(g))
    for (std::int64_t t = 0; t < r.size; ++t) REQUIRE(r.data[t] == 0.f);
}

TEST_CASE("model_backward requires a retained trace") {
  const ModelConfig cfg = tiny_config();
  ModelParams<float> p = init_params<float>(cfg, 15);
  std::mt19937_64 rng(15);
  Tensor4f img = random_tensor<float>(rng, 1, 3, 32, 32);
  StageOutputs<float> out = model_forward(cfg, p, img, BnMode::train);
  ForwardTrace<float> empty;
  std::array<Tensor4f, 6> grads;
  for (int k = 0; k < 6; ++k) grads[k] = Tensor4f(out.s[k].dims);
  CHECK_THROWS_AS(model_backward(cfg, p, out, empty, grads), usage_error);
}

TEST_CASE("detaching the s6 loss changes encoder gradients") {
  const ModelConfig cfg = tiny_config();
  ModelParams<float> p = init_params<float>(cfg, 16);
  std::mt19937_64 rng(16);
  Tensor4f img = random_tensor<float>(rng, 2, 3, 32, 32);
  const auto gt = random_labels(rng, 2, 32, 32, cfg.num_classes);
  const auto targets = downsampled_targets(gt, cfg);
  const std::vector<float> w(cfg.num_classes, 1.f);

  ForwardTrace<float> trace;
  StageOutputs<float> out = model_forward(cfg, p, img, BnMode::train, &trace);
  TotalLoss<float> tl = total_loss(out, targets, w);

  ModelParams<float> g_full = model_backward(cfg, p, out, trace, tl.stage_grads);
  auto detached = tl.stage_grads;
  detached[5] = Tensor4f(out.s[5].dims);  // zero the s6 loss gradient
  ModelParams<float> g_det = model_backward(cfg, p, out, trace, detached);

  double diff = 0.0;
  const Tensor4f& a = g_full.encoder[0][0].conv.weight;
  const Tensor4f& b = g_det.encoder[0][0].conv.weight;
  for (std::int64_t t = 0; t < a.size(); ++t)
    diff += std::fabs(double(a.data[t]) - double(b.data[t]));
  CHECK(diff > 0.0);
}

TEST_CASE("end-to-end directional derivative matches finite differences") {
  const ModelConfig cfg = tiny_config();
  std::mt19937_64 rng(17);
  ModelParams<double> params = init_params<double>(cfg, 17);
  Tensor4d img = random_tensor<double>(rng, 2, 3, 32, 32);
  const auto gt = random_labels(rng, 2, 32, 32, cfg.num_classes);
  const auto targets = downsampled_targets(gt, cfg);
  const std::vector<double> w(cfg.num_classes, 1.0);

  auto loss_at = [&](const ModelParams<double>& theta) {
    ModelParams<double> copy = theta;
    StageOutputs<double> out = model_forward(cfg, copy, img, BnMode::train);
    return total_loss(out, targets, w).total;
  };

  ModelParams<double> work = params;
  ForwardTrace<double> trace;
  StageOutputs<double> out = model_forward(cfg, work, img, BnMode::train, &trace);
  TotalLoss<double> tl = total_loss(out, targets, w);
  ModelParams<double> grads = model_backward(cfg, params, out, trace, tl.stage_grads);

  ModelParams<double> dir = zeros_like(params);
  auto drefs = learnable_params(dir);
  for (auto& r : drefs)
    for (std::int64_t t = 0; t < r.size; ++t)
      r.data[t] = std::normal_distribution<double>(0, 1)(rng);

  auto grefs = learnable_params(grads);
  double analytic = 0.0;
  for (std::size_t i = 0; i < grefs.size(); ++i)
    for (std::int64_t t = 0; t < grefs[i].size; ++t)
      analytic += grefs[i].data[t] * drefs[i].data[t];

  const double h = 1e-4;
  auto shift = [&](double scale) {
    ModelParams<double> s = params;
    auto srefs = learnable_params(s);
    for (std::size_t i = 0; i < srefs.size(); ++i)
      for (std::int64_t t = 0; t < srefs[i].size; ++t)
        srefs[i].data[t] += scale * drefs[i].data[t];
    return s;
  };
  const double fd = (loss_at(shift(h)) - loss_at(shift(-h))) / (2 * h);
  const double err =
      std::fabs(analytic - fd) / std::max({std::fabs(analytic), std::fabs(fd), 1e-8});
  CHECK(err <= 1e-4);
}
