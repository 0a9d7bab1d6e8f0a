#include "lrn/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace lrn {

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (std::uint64_t v : counts) t += v;
  return t;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes != num_classes)
    throw dim_error("confusion matrix class count mismatch");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
}

void accumulate(ConfusionMatrix& cm, const LabelMap& pred,
                const LabelMap& gt) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw dim_error("accumulate: pred/gt dims mismatch");
  const int c = cm.num_classes;
  for (std::size_t i = 0; i < gt.v.size(); ++i) {
    const std::uint8_t g = gt.v[i];
    if (g == kIgnoreLabel) continue;
    const std::uint8_t p = pred.v[i];
    if (g >= c || p >= c)
      throw data_error("accumulate: label out of range for C=" +
                       std::to_string(c));
    ++cm.at(g, p);
  }
}

EvalReport report(const ConfusionMatrix& cm) {
  if (cm.num_classes < 1 || cm.total() == 0)
    throw data_error("report: empty confusion matrix");
  const int c = cm.num_classes;
  EvalReport rep;
  rep.iou.assign(c, std::numeric_limits<double>::quiet_NaN());
  rep.accuracy.assign(c, std::numeric_limits<double>::quiet_NaN());

  double iou_sum = 0.0, acc_sum = 0.0, diag_sum = 0.0;
  int iou_count = 0, acc_count = 0;
  for (int i = 0; i < c; ++i) {
    std::uint64_t row = 0, col = 0;
    for (int j = 0; j < c; ++j) {
      row += cm.at(i, j);
      col += cm.at(j, i);
    }
    const std::uint64_t diag = cm.at(i, i);
    diag_sum += static_cast<double>(diag);
    if (row + col > 0) {
      rep.iou[i] = static_cast<double>(diag) /
                   static_cast<double>(row + col - diag);
      iou_sum += rep.iou[i];
      ++iou_count;
    }
    if (row > 0) {
      rep.accuracy[i] = static_cast<double>(diag) / static_cast<double>(row);
      acc_sum += rep.accuracy[i];
      ++acc_count;
    }
  }
  rep.mean_iou = iou_count > 0 ? iou_sum / iou_count : 0.0;
  rep.class_avg_acc = acc_count > 0 ? acc_sum / acc_count : 0.0;
  rep.pixel_acc = diag_sum / static_cast<double>(cm.total());
  return rep;
}

LabelMap argmax_labels(const Tensor4f& scores, int batch_index) {
  const int c = scores.dims.c, h = scores.dims.h, w = scores.dims.w;
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  LabelMap out(h, w);
  const float* base = scores.plane(batch_index, 0);
  for (std::int64_t t = 0; t < plane; ++t) {
    int best = 0;
    float bv = base[t];
    for (int ci = 1; ci < c; ++ci) {
      const float v = base[ci * plane + t];
      if (v > bv) {
        bv = v;
        best = ci;
      }
    }
    out.v[static_cast<std::size_t>(t)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

EvalReport evaluate_dataset(const ModelConfig& cfg,
                            ModelParams<float>& params,
                            const std::array<float, 3>& mean_pixel,
                            const DatasetManifest& manifest, bool stagewise) {
  if (manifest.size() == 0) throw data_error("empty evaluation dataset");
  if (manifest.num_classes != cfg.num_classes)
    throw dim_error("manifest num_classes " +
                    std::to_string(manifest.num_classes) +
                    " != checkpoint num_classes " +
                    std::to_string(cfg.num_classes));

  ConfusionMatrix cm(cfg.num_classes);
  std::array<ConfusionMatrix, 6> stage_cm;
  if (stagewise)
    for (auto& m : stage_cm) m = ConfusionMatrix(cfg.num_classes);

  for (std::size_t i = 0; i < manifest.size(); ++i) {
    Tensor4f image = load_image(manifest, i);
    const LabelMap gt = load_labels(manifest, i);
    for (int ch = 0; ch < 3; ++ch) {
      float* p = image.plane(0, ch);
      const std::int64_t plane =
          static_cast<std::int64_t>(image.dims.h) * image.dims.w;
      for (std::int64_t t = 0; t < plane; ++t) p[t] -= mean_pixel[ch];
    }
    StageOutputs<float> out =
        model_forward(cfg, params, image, BnMode::infer);
    accumulate(cm, argmax_labels(out.s[5], 0), gt);
    if (stagewise) {
      for (int k = 0; k < 6; ++k) {
        Tensor4f up = out.s[k];
        for (int step = 0; step < 5 - k; ++step)
          up = upsample_bilinear2x(up);
        accumulate(stage_cm[k], argmax_labels(up, 0), gt);
      }
    }
  }

  EvalReport rep = report(cm);
  if (stagewise) {
    rep.stage_miou.resize(6);
    for (int k = 0; k < 6; ++k)
      rep.stage_miou[k] = report(stage_cm[k]).mean_iou;
  }
  return rep;
}

std::vector<Rgb> make_palette(int n) {
  // Bit-shuffle colormap, shifted by one so no entry is black.
  std::vector<Rgb> pal;
  pal.reserve(n);
  for (int i = 0; i < n; ++i) {
    int id = i + 1;
    int r = 0, g = 0, b = 0;
    for (int j = 0; j < 8 && id != 0; ++j) {
      r |= ((id >> 0) & 1) << (7 - j);
      g |= ((id >> 1) & 1) << (7 - j);
      b |= ((id >> 2) & 1) << (7 - j);
      id >>= 3;
    }
    pal.push_back(Rgb{static_cast<std::uint8_t>(r),
                      static_cast<std::uint8_t>(g),
                      static_cast<std::uint8_t>(b)});
  }
  return pal;
}

Tensor4f render_prediction(const LabelMap& labels,
                           const std::vector<Rgb>& palette) {
  Tensor4f img(1, 3, labels.h, labels.w);
  for (int y = 0; y < labels.h; ++y) {
    for (int x = 0; x < labels.w; ++x) {
      const std::uint8_t v = labels.at(y, x);
      if (v == kIgnoreLabel) continue;  // black
      if (v >= palette.size())
        throw dim_error("palette too small: label " + std::to_string(v) +
                        " with " + std::to_string(palette.size()) +
                        " colors");
      img.at(0, 0, y, x) = palette[v].r / 255.f;
      img.at(0, 1, y, x) = palette[v].g / 255.f;
      img.at(0, 2, y, x) = palette[v].b / 255.f;
    }
  }
  return img;
}

namespace {

std::string fmt4(double v) {
  if (std::isnan(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string csv_value(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

std::string format_report_text(const EvalReport& rep,
                               const std::vector<std::string>& class_names) {
  std::ostringstream out;
  char line[128];
  std::snprintf(line, sizeof line, "%-16s %8s %10s\n", "class", "iou",
                "accuracy");
  out << line;
  for (std::size_t c = 0; c < rep.iou.size(); ++c) {
    const std::string name =
        c < class_names.size() ? class_names[c] : "class_" + std::to_string(c);
    std::snprintf(line, sizeof line, "%-16s %8s %10s\n", name.c_str(),
                  fmt4(rep.iou[c]).c_str(), fmt4(rep.accuracy[c]).c_str());
    out << line;
  }
  std::snprintf(line, sizeof line, "mean IoU        %8s\n",
                fmt4(rep.mean_iou).c_str());
  out << line;
  std::snprintf(line, sizeof line, "class avg acc   %8s\n",
                fmt4(rep.class_avg_acc).c_str());
  out << line;
  std::snprintf(line, sizeof line, "pixel acc       %8s\n",
                fmt4(rep.pixel_acc).c_str());
  out << line;
  for (std::size_t k = 0; k < rep.stage_miou.size(); ++k) {
    std::snprintf(line, sizeof line, "stage %zu mIoU    %8s\n", k + 1,
                  fmt4(rep.stage_miou[k]).c_str());
    out << line;
  }
  return out.str();
}

std::string format_report_csv(const EvalReport& rep,
                              const std::vector<std::string>& class_names) {
  std::ostringstream out;
  out << "class,iou,accuracy\n";
  for (std::size_t c = 0; c < rep.iou.size(); ++c) {
    const std::string name =
        c < class_names.size() ? class_names[c] : "class_" + std::to_string(c);
    out << name << "," << csv_value(rep.iou[c]) << ","
        << csv_value(rep.accuracy[c]) << "\n";
  }
  out << "mean_iou," << csv_value(rep.mean_iou) << "\n";
  out << "class_avg_acc," << csv_value(rep.class_avg_acc) << "\n";
  out << "pixel_acc," << csv_value(rep.pixel_acc) << "\n";
  for (std::size_t k = 0; k < rep.stage_miou.size(); ++k)
    out << "stage_" << (k + 1) << "_miou," << csv_value(rep.stage_miou[k])
        << "\n";
  return out.str();
}

}  // namespace lrn
