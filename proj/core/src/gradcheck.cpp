#include "lrn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <sstream>

#include "lrn/model.hpp"
#include "lrn/ops.hpp"

namespace lrn {

namespace {

constexpr double kStep = 1e-4;

double rel_err(double analytic, double fd) {
  return std::fabs(analytic - fd) /
         std::max({std::fabs(analytic), std::fabs(fd), 1e-8});
}

// Checks d(loss)/d(x) for every element of x, where loss() re-runs the
// forward path from scratch. `analytic` must be the backward result for x.
double fd_check(std::vector<double>& x, const std::vector<double>& analytic,
                const std::function<double()>& loss) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + kStep;
    const double up = loss();
    x[i] = orig - kStep;
    const double down = loss();
    x[i] = orig;
    const double fd = (up - down) / (2.0 * kStep);
    worst = std::max(worst, rel_err(analytic[i], fd));
  }
  return worst;
}

struct Rng {
  std::mt19937_64 gen;
  explicit Rng(std::uint64_t seed) : gen(seed) {}

  double normal(double stddev = 1.0) {
    return std::normal_distribution<double>(0.0, stddev)(gen);
  }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen);
  }
  int uniform_int(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(gen);
  }

  Tensor4d tensor(int n, int c, int h, int w, double stddev = 1.0) {
    Tensor4d t(n, c, h, w);
    for (double& v : t.data) v = normal(stddev);
    return t;
  }
  std::vector<double> vec(int n, double stddev = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = normal(stddev);
    return v;
  }
};

double dot(const Tensor4d& a, const Tensor4d& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

// ------------------------------------------------------------- op checkers

double check_conv3x3(Rng& rng, bool perturb) {
  const int n = rng.uniform_int(1, 2), cin = rng.uniform_int(1, 3);
  const int h = rng.uniform_int(1, 5), w = rng.uniform_int(1, 5);
  const int cout = rng.uniform_int(1, 3);
  Tensor4d input = rng.tensor(n, cin, h, w);
  Tensor4d weight = rng.tensor(cout, cin, 3, 3);
  std::vector<double> bias = rng.vec(cout);
  const Tensor4d cot = rng.tensor(n, cout, h, w);

  auto loss = [&] { return dot(conv3x3(input, weight, bias), cot); };
  Conv3x3Grads<double> g = conv3x3_backward(input, weight, cot);
  if (perturb) g.input.data[0] += 1e-2;

  double worst = fd_check(input.data, g.input.data, loss);
  worst = std::max(worst, fd_check(weight.data, g.weight.data, loss));
  worst = std::max(worst, fd_check(bias, g.bias, loss));
  return worst;
}

double check_maxpool(Rng& rng, bool perturb) {
  const int n = rng.uniform_int(1, 2), c = rng.uniform_int(1, 2);
  const int h = 2 * rng.uniform_int(1, 3), w = 2 * rng.uniform_int(1, 3);
  // Tie-free input: a shuffled lattice keeps every window gap far above
  // the FD step.
  Tensor4d input(n, c, h, w);
  std::vector<double> vals(input.size());
  for (std::size_t i = 0; i < vals.size(); ++i)
    vals[i] = static_cast<double>(i) / static_cast<double>(vals.size());
  std::shuffle(vals.begin(), vals.end(), rng.gen);
  input.data = vals;

  const PoolIndices idx = maxpool2x2(input).second;
  const Tensor4d cot = rng.tensor(n, c, h / 2, w / 2);
  auto loss = [&] { return dot(maxpool2x2(input).first, cot); };
  Tensor4d g = maxpool2x2_backward(idx, cot);
  if (perturb) g.data[0] += 1e-2;
  return fd_check(input.data, g.data, loss);
}

double check_relu(Rng& rng, bool perturb) {
  const int n = rng.uniform_int(1, 2), c = rng.uniform_int(1, 3);
  const int h = rng.uniform_int(1, 4), w = rng.uniform_int(1, 4);
  Tensor4d input(n, c, h, w);
  for (double& v : input.data) {
    v = rng.uniform(0.1, 1.0);  // keep clear of the kink at 0
    if (rng.uniform_int(0, 1)) v = -v;
  }
  const Tensor4d cot = rng.tensor(n, c, h, w);
  auto loss = [&] { return dot(relu(input), cot); };
  Tensor4d g = relu_backward(input, cot);
  if (perturb) g.data[0] += 1e-2;
  return fd_check(input.data, g.data, loss);
}

double check_batchnorm(Rng& rng, bool perturb) {
  const int n = rng.uniform_int(2, 3), c = rng.uniform_int(1, 3);
  const int h = rng.uniform_int(1, 3), w = rng.uniform_int(2, 3);
  Tensor4d input = rng.tensor(n, c, h, w);
  std::vector<double> gamma(c), beta(c);
  for (double& v : gamma) v = 1.0 + rng.normal(0.2);
  for (double& v : beta) v = rng.normal(0.5);
  const Tensor4d cot = rng.tensor(n, c, h, w);

  auto loss = [&] {
    BnState<double> state;
    state.running_mean.assign(c, 0.0);
    state.running_var.assign(c, 1.0);
    return dot(batchnorm(input, gamma, beta, state, BnMode::train), cot);
  };

  BnState<double> state;
  state.running_mean.assign(c, 0.0);
  state.running_var.assign(c, 1.0);
  BnCache<double> cache;
  batchnorm(input, gamma, beta, state, BnMode::train, &cache);
  BnGrads<double> g = batchnorm_backward(gamma, cache, cot);
  if (perturb) g.input.data[0] += 1e-2;

  double worst = fd_check(input.data, g.input.data, loss);
  worst = std::max(worst, fd_check(gamma, g.gamma, loss));
  worst = std::max(worst, fd_check(beta, g.beta, loss));
  return worst;
}

double check_upsample(Rng& rng, bool perturb) {
  const int n = rng.uniform_int(1, 2), c = rng.uniform_int(1, 2);
  const int h = rng.uniform_int(1, 4), w = rng.uniform_int(1, 4);
  Tensor4d input = rng.tensor(n, c, h, w);
  const Tensor4d cot = rng.tensor(n, c, 2 * h, 2 * w);
  auto loss = [&] { return dot(upsample_bilinear2x(input), cot); };
  Tensor4d g = upsample_bilinear2x_backward(cot);
  if (perturb) g.data[0] += 1e-2;
  return fd_check(input.data, g.data, loss);
}

double check_concat(Rng& rng, bool perturb) {
  const int n = rng.uniform_int(1, 2);
  const int ca = rng.uniform_int(1, 3), cb = rng.uniform_int(1, 3);
  const int h = rng.uniform_int(1, 4), w = rng.uniform_int(1, 4);
  Tensor4d a = rng.tensor(n, ca, h, w);
  Tensor4d b = rng.tensor(n, cb, h, w);
  const Tensor4d cot = rng.tensor(n, ca + cb, h, w);
  auto loss = [&] { return dot(concat_channels(a, b), cot); };
  auto [ga, gb] = split_backward(cot, ca);
  if (perturb) ga.data[0] += 1e-2;
  double worst = fd_check(a.data, ga.data, loss);
  worst = std::max(worst, fd_check(b.data, gb.data, loss));
  return worst;
}

double check_softmax_xent(Rng& rng, bool perturb) {
  const int n = rng.uniform_int(1, 2), c = rng.uniform_int(2, 4);
  const int h = rng.uniform_int(1, 4), w = rng.uniform_int(1, 4);
  Tensor4d logits = rng.tensor(n, c, h, w, 2.0);
  std::vector<double> weights(c);
  for (double& v : weights) v = rng.uniform(0.5, 2.0);

  std::vector<LabelMap> target;
  int valid = 0;
  for (int i = 0; i < n; ++i) {
    LabelMap lm(h, w);
    for (std::uint8_t& v : lm.v) {
      if (rng.uniform_int(0, 6) == 0) {
        v = kIgnoreLabel;
      } else {
        v = static_cast<std::uint8_t>(rng.uniform_int(0, c - 1));
        ++valid;
      }
    }
    target.push_back(std::move(lm));
  }
  if (valid == 0) target[0].v[0] = 0;

  auto loss = [&] {
    return weighted_cross_entropy(softmax_channels(logits), target, weights)
        .loss;
  };
  CrossEntropyResult<double> res =
      weighted_cross_entropy(softmax_channels(logits), target, weights);
  if (perturb) res.grad_logits.data[0] += 1e-2;
  return fd_check(logits.data, res.grad_logits.data, loss);
}

// -------------------------------------------------- end-to-end directional

double check_model_directional(Rng& rng, bool perturb) {
  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.input_h = cfg.input_w = 32;
  cfg.encoder_channels = {2, 2, 2, 2, 2};
  cfg.convs_per_stage = 1;

  const std::uint64_t seed = rng.gen();
  ModelParams<double> params = init_params<double>(cfg, seed);
  const Tensor4d image = rng.tensor(2, 3, 32, 32);

  std::vector<LabelMap> gt;
  for (int i = 0; i < 2; ++i) {
    LabelMap lm(32, 32);
    for (std::uint8_t& v : lm.v)
      v = static_cast<std::uint8_t>(rng.uniform_int(0, cfg.num_classes - 1));
    gt.push_back(std::move(lm));
  }
  const auto targets = downsampled_targets(gt, cfg);
  const std::vector<double> weights(cfg.num_classes, 1.0);

  auto loss_at = [&](const ModelParams<double>& theta) {
    ModelParams<double> copy = theta;  // BN state mutates in train mode
    StageOutputs<double> out =
        model_forward(cfg, copy, image, BnMode::train);
    return total_loss(out, targets, weights).total;
  };

  // Analytic directional derivative.
  ModelParams<double> work = params;
  ForwardTrace<double> trace;
  StageOutputs<double> out =
      model_forward(cfg, work, image, BnMode::train, &trace);
  TotalLoss<double> tl = total_loss(out, targets, weights);
  ModelParams<double> grads =
      model_backward(cfg, params, out, trace, tl.stage_grads);

  ModelParams<double> direction = zeros_like(params);
  auto drefs = learnable_params(direction);
  for (auto& r : drefs)
    for (std::int64_t i = 0; i < r.size; ++i) r.data[i] = rng.normal();

  auto grefs = learnable_params(grads);
  double analytic = 0.0;
  for (std::size_t i = 0; i < grefs.size(); ++i)
    for (std::int64_t t = 0; t < grefs[i].size; ++t)
      analytic += grefs[i].data[t] * drefs[i].data[t];
  if (perturb) analytic += 1e-2;

  // Central finite difference along the direction.
  auto offset = [&](double scale) {
    ModelParams<double> shifted = params;
    auto srefs = learnable_params(shifted);
    for (std::size_t i = 0; i < srefs.size(); ++i)
      for (std::int64_t t = 0; t < srefs[i].size; ++t)
        srefs[i].data[t] += scale * drefs[i].data[t];
    return shifted;
  };
  const double up = loss_at(offset(kStep));
  const double down = loss_at(offset(-kStep));
  const double fd = (up - down) / (2.0 * kStep);
  return rel_err(analytic, fd);
}

}  // namespace

GradCheckReport run_gradcheck(const GradCheckOptions& opts) {
  struct OpSpec {
    const char* name;
    double (*fn)(Rng&, bool);
    double tolerance;
    int instances;
  };
  const OpSpec specs[] = {
      {"conv3x3", check_conv3x3, opts.tolerance, opts.instances_per_op},
      {"maxpool2x2", check_maxpool, opts.tolerance, opts.instances_per_op},
      {"relu", check_relu, opts.tolerance, opts.instances_per_op},
      {"batchnorm", check_batchnorm, opts.tolerance, opts.instances_per_op},
      {"upsample_bilinear2x", check_upsample, opts.tolerance,
       opts.instances_per_op},
      {"concat_channels", check_concat, opts.tolerance,
       opts.instances_per_op},
      {"softmax_xent", check_softmax_xent, opts.tolerance,
       opts.instances_per_op},
      {"model_directional", check_model_directional, opts.e2e_tolerance, 1},
  };

  GradCheckReport report;
  report.all_pass = true;
  std::uint64_t op_seed = opts.seed;
  for (const OpSpec& spec : specs) {
    OpCheckResult res;
    res.op = spec.name;
    res.instances = spec.instances;
    Rng rng(op_seed++ * 7919 + 1);
    const bool perturb = opts.perturb_op == spec.name;
    for (int i = 0; i < spec.instances; ++i)
      res.max_rel_err = std::max(res.max_rel_err, spec.fn(rng, perturb));
    res.pass = res.max_rel_err <= spec.tolerance;
    report.all_pass = report.all_pass && res.pass;
    report.ops.push_back(std::move(res));
  }
  return report;
}

std::string format_report(const GradCheckReport& report) {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "%-22s %14s %10s  %s\n", "op",
                "max_rel_err", "instances", "status");
  out << line;
  for (const OpCheckResult& r : report.ops) {
    std::snprintf(line, sizeof line, "%-22s %14.3e %10d  %s\n", r.op.c_str(),
                  r.max_rel_err, r.instances, r.pass ? "ok" : "FAIL");
    out << line;
  }
  out << (report.all_pass ? "gradcheck: PASS" : "gradcheck: FAIL") << "\n";
  return out.str();
}

}  // namespace lrn
