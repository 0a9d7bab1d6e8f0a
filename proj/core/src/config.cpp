#include "lrn/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace lrn {

void TrainConfig::validate() const {
  if (batch_size < 1) throw dim_error("batch_size must be >= 1");
  if (base_lr <= 0) throw dim_error("base_lr must be > 0");
  if (momentum < 0 || momentum >= 1)
    throw dim_error("momentum must be in [0,1)");
  if (weight_decay < 0) throw dim_error("weight_decay must be >= 0");
  if (lr_step < 1) throw dim_error("lr_step must be >= 1");
  if (lr_gamma <= 0 || lr_gamma > 1)
    throw dim_error("lr_gamma must be in (0,1]");
  if (max_iters < 0) throw dim_error("max_iters must be >= 0");
  if (log_every < 1) throw dim_error("log_every must be >= 1");
  if (checkpoint_every < 0) throw dim_error("checkpoint_every must be >= 0");
}

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value) {
  throw usage_error("bad config value for " + key + ": '" + value + "'");
}

long long parse_int(const std::string& key, const std::string& value) {
  long long v = 0;
  const auto [ptr, ec] =
      std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size())
    bad_value(key, value);
  return v;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) bad_value(key, value);
    return v;
  } catch (const usage_error&) {
    throw;
  } catch (const std::exception&) {
    bad_value(key, value);
  }
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw usage_error("config line " + std::to_string(lineno) +
                        " is not key=value: '" + line + "'");
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 1);

    if (key == "num_classes") {
      cfg.model.num_classes = static_cast<int>(parse_int(key, value));
    } else if (key == "input_size") {
      const std::size_t x = value.find('x');
      if (x == std::string::npos) {
        cfg.model.input_h = cfg.model.input_w =
            static_cast<int>(parse_int(key, value));
      } else {
        cfg.model.input_h = static_cast<int>(parse_int(key, value.substr(0, x)));
        cfg.model.input_w =
            static_cast<int>(parse_int(key, value.substr(x + 1)));
      }
    } else if (key == "encoder_channels") {
      std::istringstream list(value);
      std::string item;
      int i = 0;
      while (std::getline(list, item, ',')) {
        if (i >= 5) bad_value(key, value);
        cfg.model.encoder_channels[i++] =
            static_cast<int>(parse_int(key, item));
      }
      if (i != 5) bad_value(key, value);
    } else if (key == "convs_per_stage") {
      cfg.model.convs_per_stage = static_cast<int>(parse_int(key, value));
    } else if (key == "batch_size") {
      cfg.train.batch_size = static_cast<int>(parse_int(key, value));
    } else if (key == "base_lr") {
      cfg.train.base_lr = parse_double(key, value);
    } else if (key == "momentum") {
      cfg.train.momentum = parse_double(key, value);
    } else if (key == "weight_decay") {
      cfg.train.weight_decay = parse_double(key, value);
    } else if (key == "lr_step") {
      cfg.train.lr_step = static_cast<int>(parse_int(key, value));
    } else if (key == "lr_gamma") {
      cfg.train.lr_gamma = parse_double(key, value);
    } else if (key == "max_iters") {
      cfg.train.max_iters = static_cast<int>(parse_int(key, value));
    } else if (key == "seed") {
      cfg.train.seed = static_cast<std::uint64_t>(parse_int(key, value));
    } else if (key == "class_balance") {
      if (value == "on") cfg.train.class_balance = true;
      else if (value == "off") cfg.train.class_balance = false;
      else bad_value(key, value);
    } else if (key == "log_every") {
      cfg.train.log_every = static_cast<int>(parse_int(key, value));
    } else if (key == "checkpoint_every") {
      cfg.train.checkpoint_every = static_cast<int>(parse_int(key, value));
    } else {
      throw usage_error("unknown config key '" + key + "' on line " +
                        std::to_string(lineno));
    }
  }
  cfg.model.validate();
  cfg.train.validate();
  return cfg;
}

RunConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw codec_error("cannot open config file: " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream out;
  out << "num_classes=" << cfg.model.num_classes << "\n";
  if (cfg.model.input_h == cfg.model.input_w)
    out << "input_size=" << cfg.model.input_h << "\n";
  else
    out << "input_size=" << cfg.model.input_h << "x" << cfg.model.input_w
        << "\n";
  out << "encoder_channels=";
  for (int i = 0; i < 5; ++i)
    out << cfg.model.encoder_channels[i] << (i < 4 ? "," : "\n");
  out << "convs_per_stage=" << cfg.model.convs_per_stage << "\n";
  out << "batch_size=" << cfg.train.batch_size << "\n";
  out << "base_lr=" << fmt_double(cfg.train.base_lr) << "\n";
  out << "momentum=" << fmt_double(cfg.train.momentum) << "\n";
  out << "weight_decay=" << fmt_double(cfg.train.weight_decay) << "\n";
  out << "lr_step=" << cfg.train.lr_step << "\n";
  out << "lr_gamma=" << fmt_double(cfg.train.lr_gamma) << "\n";
  out << "max_iters=" << cfg.train.max_iters << "\n";
  out << "seed=" << cfg.train.seed << "\n";
  out << "class_balance=" << (cfg.train.class_balance ? "on" : "off") << "\n";
  out << "log_every=" << cfg.train.log_every << "\n";
  out << "checkpoint_every=" << cfg.train.checkpoint_every << "\n";
  return out.str();
}

}  // namespace lrn
