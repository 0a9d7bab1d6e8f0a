#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "lrn/model.hpp"

namespace lrn {

struct TrainConfig {
  int batch_size = 10;
  double base_lr = 0.001;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  int lr_step = 50000;
  double lr_gamma = 0.1;
  int max_iters = 2000;
  std::uint64_t seed = 0;
  bool class_balance = true;
  int log_every = 10;
  int checkpoint_every = 500;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;

  bool operator==(const RunConfig&) const = default;
};

// Plain-text key=value configuration. Known keys: num_classes, input_size,
// encoder_channels, convs_per_stage, batch_size, base_lr, momentum,
// weight_decay, lr_step, lr_gamma, max_iters, seed, class_balance,
// log_every, checkpoint_every. Unknown keys are rejected; missing keys keep
// their defaults. input_size accepts "64" or "64x48" (h x w).
RunConfig parse_config_text(const std::string& text);
RunConfig load_config_file(const std::filesystem::path& path);

// Fixed key order; floating values are printed exactly (round-trip safe).
std::string serialize_config(const RunConfig& cfg);

}  // namespace lrn
