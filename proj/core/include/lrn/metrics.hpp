#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lrn/dataio.hpp"
#include "lrn/model.hpp"

namespace lrn {

// C x C co-occurrence counts; entry [gt][pred]. Ignored GT pixels are
// excluded. Merging is exact integer addition, so accumulation order never
// matters.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<std::uint64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int c)
      : num_classes(c),
        counts(static_cast<std::size_t>(c) * c, 0) {}

  std::uint64_t& at(int gt, int pred) {
    return counts[static_cast<std::size_t>(gt) * num_classes + pred];
  }
  std::uint64_t at(int gt, int pred) const {
    return counts[static_cast<std::size_t>(gt) * num_classes + pred];
  }
  std::uint64_t total() const;
  void merge(const ConfusionMatrix& other);
};

// pred must contain no ignore values; gt ignore pixels are skipped.
void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt);

struct EvalReport {
  // Per-class values; NaN for classes absent from both GT and predictions
  // (those classes are excluded from the means).
  std::vector<double> iou;
  std::vector<double> accuracy;
  double mean_iou = 0.0;
  double class_avg_acc = 0.0;
  double pixel_acc = 0.0;
  std::vector<double> stage_miou;  // six entries when stagewise eval ran
};

EvalReport report(const ConfusionMatrix& cm);

// Per-pixel channel argmax; ties go to the lowest class index.
LabelMap argmax_labels(const Tensor4f& scores, int batch_index);

// Full-dataset evaluation at s6 (infer-mode BN, batch of one per image).
// With stagewise=true also computes the mean IoU of every stage after
// bilinearly upsampling s_k to the input size in repeated 2x steps.
EvalReport evaluate_dataset(const ModelConfig& cfg,
                            ModelParams<float>& params,
                            const std::array<float, 3>& mean_pixel,
                            const DatasetManifest& manifest, bool stagewise);

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
};

// Deterministic distinct colors (none black, so rendered ignore pixels
// remain distinguishable).
std::vector<Rgb> make_palette(int n);

// Class -> palette color; ignore -> black. Throws if the palette is too
// small for the labels present.
Tensor4f render_prediction(const LabelMap& labels,
                           const std::vector<Rgb>& palette);

std::string format_report_text(const EvalReport& rep,
                               const std::vector<std::string>& class_names);
// header class,iou,accuracy; footer rows mean_iou, class_avg_acc,
// pixel_acc (plus stage_k_miou rows after a stagewise eval).
std::string format_report_csv(const EvalReport& rep,
                              const std::vector<std::string>& class_names);

}  // namespace lrn
