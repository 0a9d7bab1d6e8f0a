#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "lrn/labels.hpp"
#include "lrn/tensor.hpp"

// Synthetic dataset generation, netpbm codecs, dataset statistics and
// class-balance weights.

namespace lrn {

// -------------------------------------------------------------- generation

struct GenConfig {
  int size = 64;          // square, divisible by 32
  int num_classes = 5;    // background + shape classes
  int min_shapes = 1;
  int max_shapes = 4;

  void validate() const;
};

struct Sample {
  Tensor4f image;  // (1, 3, h, w), values nominally in [0, 1]
  LabelMap labels;
};

// Paints min..max random shapes (axis-aligned rectangles, circles,
// triangles) back-to-front over a textured class-0 background. Each shape
// carries its class base color plus N(0, 0.05) per-pixel noise; labels
// record the topmost shape per pixel. Pure function of (rng state, config).
Sample generate_sample(std::mt19937_64& rng, const GenConfig& cfg);

// Base color used by the generator for a class (background is class 0).
std::array<float, 3> class_base_color(int cls, int num_classes);

// ------------------------------------------------------------------ codecs

// Binary P6, maxval 255, header "P6\n<w> <h>\n255\n". Values are clamped to
// [0, 1] before 8-bit quantization. The reader accepts arbitrary header
// whitespace and '#' comments; failures carry the byte offset.
std::vector<std::uint8_t> write_ppm(const Tensor4f& image);
Tensor4f read_ppm(const std::vector<std::uint8_t>& bytes);

// Binary P5, one byte per pixel = class index, 255 = ignore.
std::vector<std::uint8_t> write_pgm_labels(const LabelMap& labels);
LabelMap read_pgm_labels(const std::vector<std::uint8_t>& bytes);

// -------------------------------------------------------------- filesystem

// Dataset layout: root/images/NNNNN.ppm, root/labels/NNNNN.pgm,
// root/manifest.txt (line 1 "num_classes=C", then one basename per line).
struct DatasetManifest {
  std::filesystem::path root;
  int num_classes = 0;
  std::vector<std::string> names;
  std::vector<std::string> class_names;

  std::size_t size() const { return names.size(); }
  std::filesystem::path image_path(std::size_t i) const;
  std::filesystem::path label_path(std::size_t i) const;
};

DatasetManifest read_manifest(const std::filesystem::path& root);
void write_manifest(const DatasetManifest& manifest);

Tensor4f load_image(const DatasetManifest& manifest, std::size_t i);
LabelMap load_labels(const DatasetManifest& manifest, std::size_t i);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path,
                const std::vector<std::uint8_t>& bytes);

// -------------------------------------------------------------- statistics

// freq[c] = pixels of class c / total non-ignored pixels.
std::vector<double> class_frequencies(const DatasetManifest& manifest);
std::vector<double> class_frequencies(const std::vector<LabelMap>& maps,
                                      int num_classes);

// w[c] = median(freq over classes with freq > 0) / freq[c]; absent classes
// get weight 0.
std::vector<double> median_freq_weights(const std::vector<double>& freq);

// Per-channel mean over every pixel of every image in the manifest.
std::array<float, 3> dataset_mean(const DatasetManifest& manifest);
std::array<float, 3> dataset_mean(const std::vector<Tensor4f>& images);

}  // namespace lrn
