// Command-line front end: dataset generation, training, evaluation,
// prediction and the gradient-check release gate.
//
// Exit codes: 0 success, 1 verification failure, 2 usage or I/O error,
// 3 shape/config incompatibility.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>

#include "CLI11.hpp"
#include "lrn/dataio.hpp"
#include "lrn/gradcheck.hpp"
#include "lrn/metrics.hpp"
#include "lrn/parallel.hpp"
#include "lrn/trainer.hpp"

namespace fs = std::filesystem;
using namespace lrn;

namespace {

int run_gen_data(const fs::path& out, int count, int size, int classes,
                 std::uint64_t seed) {
  GenConfig gen;
  gen.size = size;
  gen.num_classes = classes;
  gen.validate();

  std::error_code ec;
  fs::create_directories(out / "images", ec);
  fs::create_directories(out / "labels", ec);
  if (!fs::is_directory(out / "images") || !fs::is_directory(out / "labels"))
    throw codec_error("cannot create dataset directories under " +
                      out.string());

  DatasetManifest manifest;
  manifest.root = out;
  manifest.num_classes = classes;

  std::mt19937_64 rng(seed);
  for (int i = 0; i < count; ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "%05d", i);
    manifest.names.push_back(name);
    const Sample s = generate_sample(rng, gen);
    write_file(manifest.image_path(i), write_ppm(s.image));
    write_file(manifest.label_path(i), write_pgm_labels(s.labels));
  }
  write_manifest(manifest);
  std::cout << "wrote " << count << " samples to " << out.string() << "\n";
  return 0;
}

struct TrainFlags {
  std::optional<int> num_classes, convs_per_stage, batch_size, lr_step,
      max_iters, log_every, checkpoint_every;
  std::optional<double> base_lr, momentum, weight_decay, lr_gamma;
  std::optional<long long> seed;
  std::optional<std::string> input_size, encoder_channels, class_balance;

  // Flags win over the file by being parsed after it.
  std::string override_lines() const {
    std::string s;
    auto add = [&](const char* key, const auto& opt) {
      if (opt) {
        std::ostringstream os;
        os << key << "=" << *opt << "\n";
        s += os.str();
      }
    };
    add("num_classes", num_classes);
    add("input_size", input_size);
    add("encoder_channels", encoder_channels);
    add("convs_per_stage", convs_per_stage);
    add("batch_size", batch_size);
    add("base_lr", base_lr);
    add("momentum", momentum);
    add("weight_decay", weight_decay);
    add("lr_step", lr_step);
    add("lr_gamma", lr_gamma);
    add("max_iters", max_iters);
    add("seed", seed);
    add("class_balance", class_balance);
    add("log_every", log_every);
    add("checkpoint_every", checkpoint_every);
    return s;
  }
};

int run_train(const fs::path& data, const std::optional<fs::path>& config,
              const fs::path& out, const TrainFlags& flags) {
  std::string text;
  if (config) {
    std::ifstream f(*config);
    if (!f) throw codec_error("cannot open config file: " + config->string());
    std::stringstream ss;
    ss << f.rdbuf();
    text = ss.str();
    if (!text.empty() && text.back() != '\n') text += "\n";
  }
  text += flags.override_lines();
  const RunConfig cfg = parse_config_text(text);

  const DatasetManifest manifest = read_manifest(data);

  std::ofstream log(out.string() + ".log", std::ios::trunc);
  if (!log)
    throw codec_error("cannot open log file: " + out.string() + ".log");
  TrainHooks hooks;
  hooks.on_log = [&](const TrainLogEntry& e) {
    const std::string line = format_log_line(e);
    log << line << "\n";
    std::cout << line << "\n";
  };

  train_loop(cfg.model, cfg.train, manifest, out, hooks);
  std::cout << "checkpoint written to " << out.string() << "\n";
  return 0;
}

int run_eval(const fs::path& data, const fs::path& ckpt_path, bool stagewise,
             const std::optional<fs::path>& csv) {
  Checkpoint ckpt = load_checkpoint_file(ckpt_path);
  const DatasetManifest manifest = read_manifest(data);
  const EvalReport rep = evaluate_dataset(ckpt.model, ckpt.params,
                                          ckpt.mean_pixel, manifest, stagewise);
  std::cout << format_report_text(rep, manifest.class_names);
  if (csv) {
    std::ofstream f(*csv, std::ios::trunc);
    if (!f) throw codec_error("cannot write csv: " + csv->string());
    f << format_report_csv(rep, manifest.class_names);
  }
  return 0;
}

int run_predict(const fs::path& ckpt_path, const fs::path& image_path,
                const fs::path& out, const std::optional<fs::path>& color) {
  Checkpoint ckpt = load_checkpoint_file(ckpt_path);
  Tensor4f image = read_ppm(read_file(image_path));
  if (image.dims.h % 32 != 0 || image.dims.w % 32 != 0)
    throw dim_error("input image dims must be divisible by 32, got " +
                    to_string(image.dims));
  if (image.dims.h != ckpt.model.input_h ||
      image.dims.w != ckpt.model.input_w)
    throw dim_error("input image " + to_string(image.dims) +
                    " does not match the checkpoint input size " +
                    std::to_string(ckpt.model.input_h) + "x" +
                    std::to_string(ckpt.model.input_w));

  const std::int64_t plane =
      static_cast<std::int64_t>(image.dims.h) * image.dims.w;
  for (int ch = 0; ch < 3; ++ch) {
    float* p = image.plane(0, ch);
    for (std::int64_t t = 0; t < plane; ++t) p[t] -= ckpt.mean_pixel[ch];
  }

  StageOutputs<float> result =
      model_forward(ckpt.model, ckpt.params, image, BnMode::infer);
  const LabelMap pred = argmax_labels(result.s[5], 0);
  write_file(out, write_pgm_labels(pred));
  if (color) {
    const auto palette = make_palette(ckpt.model.num_classes);
    write_file(*color, write_ppm(render_prediction(pred, palette)));
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& perturb) {
  GradCheckOptions opts;
  opts.seed = seed;
  opts.perturb_op = perturb;
  const GradCheckReport report = run_gradcheck(opts);
  std::cout << format_report(report);
  if (!report.all_pass) {
    std::cout << "offending ops:";
    for (const auto& op : report.ops)
      if (!op.pass) std::cout << " " << op.op;
    std::cout << "\n";
    return 1;
  }
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const dim_error*>(&e)) return 3;
  if (dynamic_cast<const data_error*>(&e)) return 3;
  return 2;  // usage, codec, I/O, filesystem
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Coarse-to-fine dense labeling: six-stage label refinement "
               "network with deep supervision"};
  app.require_subcommand(1);
  app.fallthrough();

  int threads = 0;
  app.add_option("--threads", threads,
                 "Worker count for tensor kernels (0 = hardware); does not "
                 "change results");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  fs::path gen_out;
  int gen_count = 8, gen_size = 64, gen_classes = 5;
  std::uint64_t gen_seed = 0;
  gen->add_option("--out", gen_out, "Output dataset directory")->required();
  gen->add_option("--count", gen_count, "Number of samples");
  gen->add_option("--size", gen_size, "Image size (multiple of 32)");
  gen->add_option("--classes", gen_classes, "Class count incl. background");
  gen->add_option("--seed", gen_seed, "Generator seed");

  // train
  auto* train = app.add_subcommand("train", "Train a model");
  fs::path train_data, train_out;
  std::optional<fs::path> train_config;
  TrainFlags flags;
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--config", train_config, "key=value config file");
  train->add_option("--out", train_out, "Checkpoint output path")->required();
  train->add_option("--num-classes", flags.num_classes);
  train->add_option("--input-size", flags.input_size);
  train->add_option("--encoder-channels", flags.encoder_channels);
  train->add_option("--convs-per-stage", flags.convs_per_stage);
  train->add_option("--batch-size", flags.batch_size);
  train->add_option("--base-lr", flags.base_lr);
  train->add_option("--momentum", flags.momentum);
  train->add_option("--weight-decay", flags.weight_decay);
  train->add_option("--lr-step", flags.lr_step);
  train->add_option("--lr-gamma", flags.lr_gamma);
  train->add_option("--max-iters", flags.max_iters);
  train->add_option("--seed", flags.seed);
  train->add_option("--class-balance", flags.class_balance,
                    "on|off (median-frequency loss weights)");
  train->add_option("--log-every", flags.log_every);
  train->add_option("--checkpoint-every", flags.checkpoint_every);

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  fs::path eval_data, eval_ckpt;
  std::optional<fs::path> eval_csv;
  bool stagewise = false;
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint path")->required();
  eval->add_flag("--stagewise", stagewise,
                 "Also report the mean IoU of every stage s1..s6");
  eval->add_option("--csv", eval_csv, "Write the report as CSV");

  // predict
  auto* predict = app.add_subcommand("predict", "Segment one image");
  fs::path pr_ckpt, pr_image, pr_out;
  std::optional<fs::path> pr_color;
  predict->add_option("--ckpt", pr_ckpt, "Checkpoint path")->required();
  predict->add_option("--image", pr_image, "Input PPM image")->required();
  predict->add_option("--out", pr_out, "Output PGM label map")->required();
  predict->add_option("--color", pr_color, "Optional color rendering (PPM)");

  // gradcheck
  auto* grad = app.add_subcommand(
      "gradcheck", "Finite-difference verification of every kernel");
  std::uint64_t grad_seed = 0;
  std::string perturb;
  grad->add_option("--seed", grad_seed, "Random seed");
  grad->add_option("--perturb", perturb, "Test hook: corrupt this op")
      ->group("");  // hidden

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  set_worker_count(threads);

  try {
    if (gen->parsed())
      return run_gen_data(gen_out, gen_count, gen_size, gen_classes, gen_seed);
    if (train->parsed())
      return run_train(train_data, train_config, train_out, flags);
    if (eval->parsed())
      return run_eval(eval_data, eval_ckpt, stagewise, eval_csv);
    if (predict->parsed())
      return run_predict(pr_ckpt, pr_image, pr_out, pr_color);
    if (grad->parsed()) return cmd_gradcheck(grad_seed, perturb);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 2;
}
