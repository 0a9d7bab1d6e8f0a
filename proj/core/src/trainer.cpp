#include "lrn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

namespace lrn {

double lr_schedule(const TrainConfig& cfg, std::int64_t iter) {
  if (iter < 0) throw usage_error("lr_schedule: iter must be >= 0");
  const auto steps = static_cast<double>(iter / cfg.lr_step);
  return cfg.base_lr * std::pow(cfg.lr_gamma, steps);
}

void sgd_step(ModelParams<float>& params, const ModelParams<float>& grads,
              OptState& opt, double lr, const TrainConfig& cfg) {
  auto prefs = learnable_params(params);
  auto grefs = learnable_params(const_cast<ModelParams<float>&>(grads));
  auto vrefs = learnable_params(opt.velocity);
  if (prefs.size() != grefs.size() || prefs.size() != vrefs.size())
    throw dim_error("sgd_step: parameter/gradient/velocity count mismatch");

  const float flr = static_cast<float>(lr);
  const float mom = static_cast<float>(cfg.momentum);
  for (std::size_t i = 0; i < prefs.size(); ++i) {
    if (prefs[i].size != grefs[i].size || prefs[i].size != vrefs[i].size)
      throw dim_error("sgd_step: shape mismatch at " + prefs[i].name);
    const float wd = prefs[i].kind == ParamKind::conv_weight
                         ? static_cast<float>(cfg.weight_decay)
                         : 0.f;
    float* th = prefs[i].data;
    const float* g = grefs[i].data;
    float* v = vrefs[i].data;
    for (std::int64_t t = 0; t < prefs[i].size; ++t) {
      v[t] = mom * v[t] + flr * (g[t] + wd * th[t]);
      th[t] -= v[t];
    }
  }
}

std::string format_log_line(const TrainLogEntry& e) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "iter=%lld lr=%.9g loss=%.9g l1=%.9g l2=%.9g l3=%.9g "
                "l4=%.9g l5=%.9g l6=%.9g",
                static_cast<long long>(e.iter), e.lr, e.total, e.stage[0],
                e.stage[1], e.stage[2], e.stage[3], e.stage[4], e.stage[5]);
  return buf;
}

Checkpoint train_loop(const ModelConfig& model_cfg, const TrainConfig& cfg,
                      const DatasetManifest& manifest,
                      const std::filesystem::path& checkpoint_path,
                      const TrainHooks& hooks) {
  model_cfg.validate();
  cfg.validate();
  if (manifest.size() == 0) throw data_error("empty training dataset");
  if (static_cast<int>(manifest.size()) < cfg.batch_size)
    throw data_error("dataset smaller than one batch (" +
                     std::to_string(manifest.size()) + " < " +
                     std::to_string(cfg.batch_size) + ")");
  if (manifest.num_classes != model_cfg.num_classes)
    throw dim_error("manifest num_classes " +
                    std::to_string(manifest.num_classes) +
                    " != model num_classes " +
                    std::to_string(model_cfg.num_classes));

  // Preload the dataset; desk-scale sets fit in memory.
  std::vector<Tensor4f> images;
  std::vector<LabelMap> labels;
  images.reserve(manifest.size());
  labels.reserve(manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i) {
    images.push_back(load_image(manifest, i));
    labels.push_back(load_labels(manifest, i));
    if (images.back().dims.h != model_cfg.input_h ||
        images.back().dims.w != model_cfg.input_w)
      throw dim_error("sample " + manifest.names[i] + " has dims " +
                      to_string(images.back().dims) +
                      ", expected configured input size");
    if (labels.back().h != images.back().dims.h ||
        labels.back().w != images.back().dims.w)
      throw dim_error("sample " + manifest.names[i] +
                      " image/label dims disagree");
  }

  Checkpoint ckpt;
  ckpt.model = model_cfg;
  ckpt.train = cfg;
  ckpt.mean_pixel = dataset_mean(images);

  std::vector<float> class_weights(model_cfg.num_classes, 1.f);
  if (cfg.class_balance) {
    const std::vector<double> w = median_freq_weights(
        class_frequencies(labels, model_cfg.num_classes));
    for (int c = 0; c < model_cfg.num_classes; ++c)
      class_weights[c] = static_cast<float>(w[c]);
  }

  ckpt.params = init_params<float>(model_cfg, cfg.seed);
  ckpt.opt.velocity = zeros_like(ckpt.params);
  ckpt.opt.iter = 0;

  std::mt19937_64 rng(cfg.seed + 1);
  std::vector<std::size_t> order(manifest.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t batches_per_epoch = manifest.size() / cfg.batch_size;
  std::size_t batch_in_epoch = batches_per_epoch;  // forces initial shuffle

  const int bh = model_cfg.input_h, bw = model_cfg.input_w;
  const std::int64_t plane = static_cast<std::int64_t>(bh) * bw;

  auto save = [&](const std::filesystem::path& path) {
    if (!path.empty()) save_checkpoint_file(ckpt, path);
  };

  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    if (batch_in_epoch == batches_per_epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      batch_in_epoch = 0;
    }

    Tensor4f batch(cfg.batch_size, 3, bh, bw);
    std::vector<LabelMap> batch_labels(cfg.batch_size);
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::size_t s = order[batch_in_epoch * cfg.batch_size + b];
      for (int ch = 0; ch < 3; ++ch) {
        const float* src = images[s].plane(0, ch);
        float* dst = batch.plane(b, ch);
        const float mean = ckpt.mean_pixel[ch];
        for (std::int64_t t = 0; t < plane; ++t) dst[t] = src[t] - mean;
      }
      batch_labels[b] = labels[s];
    }
    ++batch_in_epoch;

    const auto targets = downsampled_targets(batch_labels, model_cfg);
    ForwardTrace<float> trace;
    StageOutputs<float> out =
        model_forward(model_cfg, ckpt.params, batch, BnMode::train, &trace);
    TotalLoss<float> loss = total_loss(out, targets, class_weights);
    ModelParams<float> grads =
        model_backward(model_cfg, ckpt.params, out, trace, loss.stage_grads);

    const double lr = lr_schedule(cfg, iter);
    sgd_step(ckpt.params, grads, ckpt.opt, lr, cfg);
    ckpt.opt.iter = static_cast<std::uint64_t>(iter) + 1;

    if (hooks.on_log &&
        (iter % cfg.log_every == 0 || iter == cfg.max_iters - 1)) {
      hooks.on_log(TrainLogEntry{iter, lr, loss.total, loss.per_stage});
    }
    if (cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 &&
        iter + 1 < cfg.max_iters) {
      save(checkpoint_path);
    }
  }

  save(checkpoint_path);
  return ckpt;
}

}  // namespace lrn
