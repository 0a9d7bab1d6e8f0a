#pragma once

#include <filesystem>
#include <functional>

#include "lrn/config.hpp"
#include "lrn/dataio.hpp"
#include "lrn/model.hpp"

namespace lrn {

// Per-parameter momentum buffers plus the global iteration counter.
struct OptState {
  ModelParams<float> velocity;
  std::uint64_t iter = 0;
};

// Everything needed to resume training or run inference.
struct Checkpoint {
  ModelConfig model;
  TrainConfig train;
  ModelParams<float> params;
  OptState opt;
  std::array<float, 3> mean_pixel{};
};

// lr = base_lr * lr_gamma^floor(iter / lr_step)
double lr_schedule(const TrainConfig& cfg, std::int64_t iter);

// Caffe-convention momentum update:
//   v <- momentum * v + lr * (g + weight_decay * theta); theta <- theta - v
// Weight decay is skipped for biases and BN gamma/beta. BN running stats
// and the iteration counter are not touched.
void sgd_step(ModelParams<float>& params, const ModelParams<float>& grads,
              OptState& opt, double lr, const TrainConfig& cfg);

struct TrainLogEntry {
  std::int64_t iter = 0;
  double lr = 0.0;
  double total = 0.0;
  std::array<double, 6> stage{};
};

// "iter=<n> lr=<f> loss=<f> l1=<f> ... l6=<f>"
std::string format_log_line(const TrainLogEntry& entry);

struct TrainHooks {
  std::function<void(const TrainLogEntry&)> on_log;
};

// Full optimization loop: seeded epoch-wise shuffling without replacement
// (last partial batch dropped), forward, deeply supervised loss, backward,
// SGD step. Writes the checkpoint every checkpoint_every iterations and at
// the end (skipped when checkpoint_path is empty). Deterministic for a
// fixed seed/config/dataset.
Checkpoint train_loop(const ModelConfig& model_cfg, const TrainConfig& cfg,
                      const DatasetManifest& manifest,
                      const std::filesystem::path& checkpoint_path,
                      const TrainHooks& hooks = {});

// Checkpoint codec. Layout: magic "LRN1", u32 version, u32 config-text
// length + bytes, u32 tensor count, then per tensor u16 name length, name,
// u8 rank, u32 dims, little-endian float payload, and a trailing u64
// FNV-1a checksum over all preceding bytes.
std::vector<std::uint8_t> save_checkpoint(const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::vector<std::uint8_t>& bytes);

// Atomic file variants (write temp + rename).
void save_checkpoint_file(const Checkpoint& ckpt,
                          const std::filesystem::path& path);
Checkpoint load_checkpoint_file(const std::filesystem::path& path);

}  // namespace lrn
