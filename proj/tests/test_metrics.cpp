#include <random>

#include "doctest.h"
#include "lrn/metrics.hpp"
#include "test_util.hpp"

using namespace lrn;
using namespace lrn::test;

// --------------------------------------------------------------- accumulate

TEST_CASE("accumulate: perfect predictions go to the diagonal") {
  ConfusionMatrix cm(3);
  LabelMap gt(2, 3);
  gt.v = {0, 1, 2, 0, 1, 2};
  accumulate(cm, gt, gt);
  CHECK(cm.at(0, 0) == 2);
  CHECK(cm.at(1, 1) == 2);
  CHECK(cm.at(2, 2) == 2);
  CHECK(cm.total() == 6);
}

TEST_CASE("accumulate: fully ignored ground truth leaves the matrix alone") {
  ConfusionMatrix cm(2);
  LabelMap gt(2, 2, kIgnoreLabel);
  LabelMap pred(2, 2, 1);
  accumulate(cm, pred, gt);
  CHECK(cm.total() == 0);
}

TEST_CASE("accumulate: 2x2 counting oracle") {
  ConfusionMatrix cm(2);
  LabelMap gt(2, 2), pred(2, 2);
  gt.v = {0, 0, 1, 1};
  pred.v = {0, 1, 1, 1};
  accumulate(cm, pred, gt);
  CHECK(cm.at(0, 0) == 1);
  CHECK(cm.at(0, 1) == 1);
  CHECK(cm.at(1, 0) == 0);
  CHECK(cm.at(1, 1) == 2);

  LabelMap small(1, 2);
  CHECK_THROWS_AS(accumulate(cm, small, gt), dim_error);
}

TEST_CASE("accumulate merging is order independent") {
  std::mt19937_64 rng(1);
  std::vector<std::pair<LabelMap, LabelMap>> samples;
  for (int i = 0; i < 6; ++i) {
    LabelMap gt(3, 3), pred(3, 3);
    for (auto& v : gt.v)
      v = (rng() % 7 == 0) ? kIgnoreLabel : std::uint8_t(rng() % 3);
    for (auto& v : pred.v) v = std::uint8_t(rng() % 3);
    samples.emplace_back(pred, gt);
  }
  ConfusionMatrix forward(3), backward(3);
  for (const auto& [p, g] : samples) accumulate(forward, p, g);
  for (auto it = samples.rbegin(); it != samples.rend(); ++it)
    accumulate(backward, it->first, it->second);
  CHECK(forward.counts == backward.counts);
}

// ------------------------------------------------------------------- report

TEST_CASE("report: perfect prediction gives all ones") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 10;
  cm.at(1, 1) = 5;
  cm.at(2, 2) = 1;
  const EvalReport rep = report(cm);
  for (double v : rep.iou) CHECK(v == 1.0);
  CHECK(rep.mean_iou == 1.0);
  CHECK(rep.pixel_acc == 1.0);
}

TEST_CASE("report: disjoint class has IoU zero") {
  ConfusionMatrix cm(2);
  cm.at(0, 1) = 4;  // class 0 always predicted as 1
  cm.at(1, 1) = 4;
  const EvalReport rep = report(cm);
  CHECK(rep.iou[0] == 0.0);
}

TEST_CASE("report: hand-computed 2x2 matrix") {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 1;
  cm.at(0, 1) = 1;
  cm.at(1, 0) = 0;
  cm.at(1, 1) = 2;
  const EvalReport rep = report(cm);
  CHECK(rep.iou[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(rep.iou[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(rep.mean_iou == doctest::Approx(7.0 / 12.0).epsilon(1e-12));

  ConfusionMatrix empty(2);
  CHECK_THROWS_AS(report(empty), data_error);
}

TEST_CASE("report: absent classes are excluded from the means") {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 8;
  cm.at(1, 1) = 2;  // class 2 absent everywhere
  const EvalReport rep = report(cm);
  CHECK(std::isnan(rep.iou[2]));
  CHECK(rep.mean_iou == 1.0);
  CHECK(rep.class_avg_acc == 1.0);
}

TEST_CASE("report invariants: IoU <= accuracy, permutation invariance") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const int c = 2 + int(rng() % 4);
    ConfusionMatrix cm(c);
    for (auto& v : cm.counts) v = rng() % 17;
    if (cm.total() == 0) cm.at(0, 0) = 1;
    const EvalReport rep = report(cm);
    for (int i = 0; i < c; ++i) {
      if (std::isnan(rep.iou[i]) || std::isnan(rep.accuracy[i])) continue;
      CHECK(rep.iou[i] <= rep.accuracy[i] + 1e-12);
    }

    // permute classes: pi(i) = (i+1) mod c applied to rows and columns
    ConfusionMatrix perm(c);
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < c; ++j)
        perm.at((i + 1) % c, (j + 1) % c) = cm.at(i, j);
    const EvalReport rep2 = report(perm);
    CHECK(rep2.mean_iou == doctest::Approx(rep.mean_iou).epsilon(1e-12));
  }
}

// ------------------------------------------------------------------- argmax

TEST_CASE("argmax_labels picks the lowest index on ties") {
  Tensor4f scores(1, 3, 1, 2);
  // pixel 0: all equal -> class 0; pixel 1: class 2 wins
  scores.at(0, 0, 0, 0) = 1.f;
  scores.at(0, 1, 0, 0) = 1.f;
  scores.at(0, 2, 0, 0) = 1.f;
  scores.at(0, 0, 0, 1) = 0.f;
  scores.at(0, 1, 0, 1) = 0.5f;
  scores.at(0, 2, 0, 1) = 2.f;
  const LabelMap lm = argmax_labels(scores, 0);
  CHECK(lm.at(0, 0) == 0);
  CHECK(lm.at(0, 1) == 2);
}

// ---------------------------------------------------------------- rendering

TEST_CASE("render_prediction paints classes and ignores in black") {
  const auto palette = make_palette(4);
  for (const Rgb& c : palette) CHECK(!(c == Rgb{0, 0, 0}));
  // distinctness
  for (std::size_t i = 0; i < palette.size(); ++i)
    for (std::size_t j = i + 1; j < palette.size(); ++j)
      CHECK(!(palette[i] == palette[j]));

  LabelMap lm(1, 3);
  lm.v = {0, 2, kIgnoreLabel};
  const Tensor4f img = render_prediction(lm, palette);
  CHECK(img.at(0, 0, 0, 0) == doctest::Approx(palette[0].r / 255.f));
  CHECK(img.at(0, 1, 0, 1) == doctest::Approx(palette[2].g / 255.f));
  CHECK(img.at(0, 0, 0, 2) == 0.f);
  CHECK(img.at(0, 1, 0, 2) == 0.f);

  LabelMap big(1, 1, 9);
  CHECK_THROWS_AS(render_prediction(big, palette), dim_error);
}

TEST_CASE("render roundtrip recovers labels via color matching") {
  std::mt19937_64 rng(3);
  const int c = 6;
  const auto palette = make_palette(c);
  LabelMap lm(5, 7);
  for (auto& v : lm.v) v = std::uint8_t(rng() % c);
  const Tensor4f img = render_prediction(lm, palette);

  LabelMap back(5, 7);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 7; ++x) {
      const Rgb px{std::uint8_t(std::lround(img.at(0, 0, y, x) * 255.f)),
                   std::uint8_t(std::lround(img.at(0, 1, y, x) * 255.f)),
                   std::uint8_t(std::lround(img.at(0, 2, y, x) * 255.f))};
      int found = -1;
      for (int k = 0; k < c; ++k)
        if (palette[k] == px) found = k;
      REQUIRE(found >= 0);
      back.at(y, x) = std::uint8_t(found);
    }
  CHECK(back == lm);
}

// ----------------------------------------------------------------- reports

TEST_CASE("report formatting: text table and csv schema") {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = 3;
  cm.at(0, 1) = 1;
  cm.at(1, 1) = 4;
  EvalReport rep = report(cm);
  rep.stage_miou = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};

  const std::string text = format_report_text(rep, {"bg", "fg"});
  CHECK(text.find("bg") != std::string::npos);
  CHECK(text.find("mean IoU") != std::string::npos);
  // exactly six stage rows
  std::size_t stage_rows = 0, pos = 0;
  while ((pos = text.find("stage ", pos)) != std::string::npos) {
    ++stage_rows;
    pos += 6;
  }
  CHECK(stage_rows == 6);

  const std::string csv = format_report_csv(rep, {"bg", "fg"});
  CHECK(csv.rfind("class,iou,accuracy\n", 0) == 0);
  CHECK(csv.find("mean_iou,") != std::string::npos);
  CHECK(csv.find("class_avg_acc,") != std::string::npos);
  CHECK(csv.find("pixel_acc,") != std::string::npos);
  CHECK(csv.find("stage_6_miou,") != std::string::npos);
}

// ---------------------------------------------------------- dataset evals

TEST_CASE("evaluate_dataset stage-6 equals the default path") {
  TempDir dir("eval");
  std::filesystem::create_directories(dir.path / "images");
  std::filesystem::create_directories(dir.path / "labels");
  DatasetManifest m;
  m.root = dir.path;
  m.num_classes = 3;
  GenConfig gen;
  gen.size = 32;
  gen.num_classes = 3;
  std::mt19937_64 rng(4);
  for (int i = 0; i < 3; ++i) {
    char name[16];
    std::snprintf(name, sizeof name, "%05d", i);
    m.names.push_back(name);
    const Sample s = generate_sample(rng, gen);
    write_file(m.image_path(i), write_ppm(s.image));
    write_file(m.label_path(i), write_pgm_labels(s.labels));
  }
  write_manifest(m);
  const DatasetManifest data = read_manifest(dir.path);

  ModelConfig cfg;
  cfg.num_classes = 3;
  cfg.input_h = cfg.input_w = 32;
  cfg.encoder_channels = {4, 4, 4, 4, 4};
  cfg.convs_per_stage = 1;
  ModelParams<float> params = init_params<float>(cfg, 9);

  const EvalReport plain =
      evaluate_dataset(cfg, params, {0.4f, 0.4f, 0.4f}, data, false);
  const EvalReport staged =
      evaluate_dataset(cfg, params, {0.4f, 0.4f, 0.4f}, data, true);
  REQUIRE(staged.stage_miou.size() == 6);
  CHECK(staged.stage_miou[5] == plain.mean_iou);
  CHECK(staged.mean_iou == plain.mean_iou);

  ModelConfig wrong = cfg;
  wrong.num_classes = 4;
  ModelParams<float> wp = init_params<float>(wrong, 9);
  CHECK_THROWS_AS(evaluate_dataset(wrong, wp, {0, 0, 0}, data, false),
                  dim_error);
}
