#include "lrn/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace lrn {

// -------------------------------------------------------------- generation

void GenConfig::validate() const {
  if (size < 32 || size % 32 != 0)
    throw dim_error("generator size must be a positive multiple of 32, got " +
                    std::to_string(size));
  if (num_classes < 2)
    throw dim_error("generator needs num_classes >= 2");
  if (num_classes > 255)
    throw dim_error("generator supports at most 255 classes");
  if (min_shapes < 0 || max_shapes < min_shapes)
    throw dim_error("invalid shapes-per-image range");
}

namespace {

std::array<float, 3> hsv_to_rgb(float h, float s, float v) {
  h = std::fmod(h, 360.f);
  if (h < 0) h += 360.f;
  const float c = v * s;
  const float x = c * (1.f - std::fabs(std::fmod(h / 60.f, 2.f) - 1.f));
  const float m = v - c;
  float r = 0, g = 0, b = 0;
  if (h < 60) { r = c; g = x; }
  else if (h < 120) { r = x; g = c; }
  else if (h < 180) { g = c; b = x; }
  else if (h < 240) { g = x; b = c; }
  else if (h < 300) { r = x; b = c; }
  else { r = c; b = x; }
  return {r + m, g + m, b + m};
}

}  // namespace

std::array<float, 3> class_base_color(int cls, int num_classes) {
  if (cls == 0) return {0.45f, 0.45f, 0.45f};
  // Hues spread over the wheel; saturation/value keep every channel at
  // least 3 sigma (0.15) away from the [0,1] clamp.
  const float hue = 360.f * static_cast<float>(cls - 1) /
                    static_cast<float>(std::max(1, num_classes - 1));
  return hsv_to_rgb(hue, 0.6f, 0.72f);
}

Sample generate_sample(std::mt19937_64& rng, const GenConfig& cfg) {
  cfg.validate();
  const int hw = cfg.size;
  Sample sample;
  sample.image = Tensor4f(1, 3, hw, hw);
  sample.labels = LabelMap(hw, hw, 0);

  std::normal_distribution<float> noise(0.f, 0.05f);
  std::uniform_real_distribution<float> unit(0.f, 1.f);

  // Textured background: base color, a low-frequency sinusoid and noise.
  const float fx = 1.f + 2.f * unit(rng);
  const float fy = 1.f + 2.f * unit(rng);
  const float phase = 2.f * std::numbers::pi_v<float> * unit(rng);
  const std::array<float, 3> bg = class_base_color(0, cfg.num_classes);
  for (int y = 0; y < hw; ++y) {
    for (int x = 0; x < hw; ++x) {
      const float tex =
          0.06f * std::sin(2.f * std::numbers::pi_v<float> *
                               (fx * x + fy * y) / static_cast<float>(hw) +
                           phase);
      for (int ch = 0; ch < 3; ++ch)
        sample.image.at(0, ch, y, x) = bg[ch] + tex + noise(rng);
    }
  }

  const int count = cfg.min_shapes == cfg.max_shapes
                        ? cfg.min_shapes
                        : static_cast<int>(cfg.min_shapes +
                                           rng() % (cfg.max_shapes -
                                                    cfg.min_shapes + 1));

  auto paint = [&](int x0, int x1, int y0, int y1, auto&& inside, int cls) {
    const std::array<float, 3> col = class_base_color(cls, cfg.num_classes);
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    x1 = std::min(x1, hw - 1);
    y1 = std::min(y1, hw - 1);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        if (!inside(x, y)) continue;
        for (int ch = 0; ch < 3; ++ch)
          sample.image.at(0, ch, y, x) = col[ch] + noise(rng);
        sample.labels.at(y, x) = static_cast<std::uint8_t>(cls);
      }
    }
  };

  const int min_r = hw / 8, max_r = hw / 4;
  for (int s = 0; s < count; ++s) {
    const int cls = 1 + static_cast<int>(rng() %
                                         static_cast<unsigned>(
                                             cfg.num_classes - 1));
    const int kind = static_cast<int>(rng() % 3);
    const int cx = static_cast<int>(rng() % static_cast<unsigned>(hw));
    const int cy = static_cast<int>(rng() % static_cast<unsigned>(hw));
    auto radius = [&] {
      return min_r + static_cast<int>(rng() %
                                      static_cast<unsigned>(max_r - min_r + 1));
    };

    if (kind == 0) {  // axis-aligned rectangle
      const int rx = radius(), ry = radius();
      paint(cx - rx, cx + rx, cy - ry, cy + ry,
            [](int, int) { return true; }, cls);
    } else if (kind == 1) {  // circle
      const int r = radius();
      paint(cx - r, cx + r, cy - r, cy + r,
            [&](int x, int y) {
              const int dx = x - cx, dy = y - cy;
              return dx * dx + dy * dy <= r * r;
            },
            cls);
    } else {  // triangle: three vertices around the center
      std::array<int, 3> vx{}, vy{};
      long cross = 0;
      do {
        for (int i = 0; i < 3; ++i) {
          vx[i] = cx + static_cast<int>(rng() % (2u * max_r + 1)) - max_r;
          vy[i] = cy + static_cast<int>(rng() % (2u * max_r + 1)) - max_r;
        }
        cross = static_cast<long>(vx[1] - vx[0]) * (vy[2] - vy[0]) -
                static_cast<long>(vy[1] - vy[0]) * (vx[2] - vx[0]);
      } while (std::labs(cross) < static_cast<long>(min_r) * min_r);
      auto edge = [](int ax, int ay, int bx, int by, int px, int py) {
        return static_cast<long>(bx - ax) * (py - ay) -
               static_cast<long>(by - ay) * (px - ax);
      };
      const int sign = cross > 0 ? 1 : -1;
      paint(std::min({vx[0], vx[1], vx[2]}), std::max({vx[0], vx[1], vx[2]}),
            std::min({vy[0], vy[1], vy[2]}), std::max({vy[0], vy[1], vy[2]}),
            [&](int x, int y) {
              return sign * edge(vx[0], vy[0], vx[1], vy[1], x, y) >= 0 &&
                     sign * edge(vx[1], vy[1], vx[2], vy[2], x, y) >= 0 &&
                     sign * edge(vx[2], vy[2], vx[0], vy[0], x, y) >= 0;
            },
            cls);
    }
  }
  return sample;
}

// ------------------------------------------------------------------ codecs

namespace {

struct ByteReader {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  [[noreturn]] void fail(const std::string& what) const {
    throw codec_error(what + " at byte offset " + std::to_string(pos));
  }

  int peek() const {
    return pos < bytes.size() ? static_cast<int>(bytes[pos]) : -1;
  }
  int get() {
    if (pos >= bytes.size()) fail("unexpected end of file");
    return static_cast<int>(bytes[pos++]);
  }

  void skip_space_and_comments() {
    for (;;) {
      int ch = peek();
      if (ch == '#') {
        while (ch != '\n' && ch != -1) ch = (++pos, peek());
      } else if (ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n') {
        ++pos;
      } else {
        return;
      }
    }
  }

  int read_int(const char* field) {
    skip_space_and_comments();
    if (!std::isdigit(peek())) fail(std::string("expected integer ") + field);
    long v = 0;
    while (std::isdigit(peek())) {
      v = v * 10 + (get() - '0');
      if (v > 1'000'000'000L) fail(std::string("oversized ") + field);
    }
    return static_cast<int>(v);
  }
};

void append_header(std::vector<std::uint8_t>& out, const char* magic, int w,
                   int h) {
  char buf[64];
  const int len = std::snprintf(buf, sizeof buf, "%s\n%d %d\n255\n", magic, w, h);
  out.insert(out.end(), buf, buf + len);
}

}  // namespace

std::vector<std::uint8_t> write_ppm(const Tensor4f& image) {
  if (image.dims.n != 1 || image.dims.c != 3)
    throw dim_error("write_ppm expects a (1,3,h,w) tensor, got " +
                    to_string(image.dims));
  const int h = image.dims.h, w = image.dims.w;
  std::vector<std::uint8_t> out;
  out.reserve(static_cast<std::size_t>(h) * w * 3 + 32);
  append_header(out, "P6", w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        const float v = std::clamp(image.at(0, ch, y, x), 0.f, 1.f);
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.f)));
      }
    }
  }
  return out;
}

Tensor4f read_ppm(const std::vector<std::uint8_t>& bytes) {
  ByteReader r{bytes};
  if (r.get() != 'P' || r.get() != '6') {
    r.pos = 0;
    r.fail("bad magic, expected P6");
  }
  const int w = r.read_int("width");
  const int h = r.read_int("height");
  const int maxval = r.read_int("maxval");
  if (w < 1 || h < 1) r.fail("invalid dimensions");
  if (maxval < 1 || maxval > 255) r.fail("unsupported maxval");
  r.get();  // single whitespace byte after maxval
  const std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() - r.pos < need) {
    r.pos = bytes.size();
    r.fail("truncated pixel data, need " + std::to_string(need) + " bytes");
  }
  Tensor4f img(1, 3, h, w);
  const float scale = 1.f / static_cast<float>(maxval);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch)
        img.at(0, ch, y, x) = static_cast<float>(bytes[r.pos++]) * scale;
  return img;
}

std::vector<std::uint8_t> write_pgm_labels(const LabelMap& labels) {
  std::vector<std::uint8_t> out;
  out.reserve(labels.v.size() + 32);
  append_header(out, "P5", labels.w, labels.h);
  out.insert(out.end(), labels.v.begin(), labels.v.end());
  return out;
}

LabelMap read_pgm_labels(const std::vector<std::uint8_t>& bytes) {
  ByteReader r{bytes};
  if (r.get() != 'P' || r.get() != '5') {
    r.pos = 0;
    r.fail("bad magic, expected P5");
  }
  const int w = r.read_int("width");
  const int h = r.read_int("height");
  const int maxval = r.read_int("maxval");
  if (w < 1 || h < 1) r.fail("invalid dimensions");
  if (maxval < 1 || maxval > 255) r.fail("unsupported maxval");
  r.get();
  const std::size_t need = static_cast<std::size_t>(w) * h;
  if (bytes.size() - r.pos < need) {
    r.pos = bytes.size();
    r.fail("truncated pixel data, need " + std::to_string(need) + " bytes");
  }
  LabelMap lm(h, w);
  for (std::size_t i = 0; i < need; ++i, ++r.pos) {
    if (bytes[r.pos] > maxval) r.fail("sample value exceeds declared maxval");
    lm.v[i] = bytes[r.pos];
  }
  return lm;
}

// -------------------------------------------------------------- filesystem

std::filesystem::path DatasetManifest::image_path(std::size_t i) const {
  return root / "images" / (names[i] + ".ppm");
}

std::filesystem::path DatasetManifest::label_path(std::size_t i) const {
  return root / "labels" / (names[i] + ".pgm");
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw codec_error("cannot open file: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const std::filesystem::path& path,
                const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw codec_error("cannot write file: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw codec_error("short write: " + path.string());
}

DatasetManifest read_manifest(const std::filesystem::path& root) {
  const std::filesystem::path file = root / "manifest.txt";
  std::ifstream f(file);
  if (!f) throw codec_error("cannot open manifest: " + file.string());
  DatasetManifest m;
  m.root = root;
  std::string line;
  if (!std::getline(f, line) || line.rfind("num_classes=", 0) != 0)
    throw codec_error("manifest must start with num_classes=C: " +
                      file.string());
  try {
    m.num_classes = std::stoi(line.substr(12));
  } catch (const std::exception&) {
    throw codec_error("bad num_classes line in " + file.string());
  }
  if (m.num_classes < 2 || m.num_classes > 255)
    throw data_error("manifest num_classes out of range: " + line);
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) m.names.push_back(line);
  }
  for (int c = 0; c < m.num_classes; ++c)
    m.class_names.push_back("class_" + std::to_string(c));
  return m;
}

void write_manifest(const DatasetManifest& manifest) {
  const std::filesystem::path file = manifest.root / "manifest.txt";
  std::ofstream f(file, std::ios::trunc);
  if (!f) throw codec_error("cannot write manifest: " + file.string());
  f << "num_classes=" << manifest.num_classes << "\n";
  for (const std::string& name : manifest.names) f << name << "\n";
}

Tensor4f load_image(const DatasetManifest& manifest, std::size_t i) {
  return read_ppm(read_file(manifest.image_path(i)));
}

LabelMap load_labels(const DatasetManifest& manifest, std::size_t i) {
  return read_pgm_labels(read_file(manifest.label_path(i)));
}

// -------------------------------------------------------------- statistics

std::vector<double> class_frequencies(const std::vector<LabelMap>& maps,
                                      int num_classes) {
  std::vector<std::uint64_t> counts(num_classes, 0);
  std::uint64_t total = 0;
  for (const LabelMap& lm : maps) {
    for (const std::uint8_t v : lm.v) {
      if (v == kIgnoreLabel) continue;
      if (v >= num_classes)
        throw data_error("label " + std::to_string(v) +
                         " out of range for num_classes=" +
                         std::to_string(num_classes));
      ++counts[v];
      ++total;
    }
  }
  if (total == 0) throw data_error("no non-ignored pixels in dataset");
  std::vector<double> freq(num_classes);
  for (int c = 0; c < num_classes; ++c)
    freq[c] = static_cast<double>(counts[c]) / static_cast<double>(total);
  return freq;
}

std::vector<double> class_frequencies(const DatasetManifest& manifest) {
  if (manifest.size() == 0) throw data_error("empty dataset");
  std::vector<LabelMap> maps;
  maps.reserve(manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i)
    maps.push_back(load_labels(manifest, i));
  return class_frequencies(maps, manifest.num_classes);
}

std::vector<double> median_freq_weights(const std::vector<double>& freq) {
  std::vector<double> present;
  for (double f : freq)
    if (f > 0) present.push_back(f);
  if (present.empty()) throw data_error("all class frequencies are zero");
  std::sort(present.begin(), present.end());
  const std::size_t n = present.size();
  const double median = n % 2 == 1
                            ? present[n / 2]
                            : 0.5 * (present[n / 2 - 1] + present[n / 2]);
  std::vector<double> w(freq.size(), 0.0);
  for (std::size_t c = 0; c < freq.size(); ++c)
    if (freq[c] > 0) w[c] = median / freq[c];
  return w;
}

std::array<float, 3> dataset_mean(const std::vector<Tensor4f>& images) {
  if (images.empty()) throw data_error("empty dataset");
  double sum[3] = {0, 0, 0};
  std::uint64_t count = 0;
  for (const Tensor4f& img : images) {
    const std::int64_t plane =
        static_cast<std::int64_t>(img.dims.h) * img.dims.w;
    for (int ch = 0; ch < 3; ++ch) {
      const float* p = img.plane(0, ch);
      for (std::int64_t t = 0; t < plane; ++t) sum[ch] += p[t];
    }
    count += static_cast<std::uint64_t>(plane);
  }
  return {static_cast<float>(sum[0] / count),
          static_cast<float>(sum[1] / count),
          static_cast<float>(sum[2] / count)};
}

std::array<float, 3> dataset_mean(const DatasetManifest& manifest) {
  if (manifest.size() == 0) throw data_error("empty dataset");
  std::vector<Tensor4f> images;
  images.reserve(manifest.size());
  for (std::size_t i = 0; i < manifest.size(); ++i)
    images.push_back(load_image(manifest, i));
  return dataset_mean(images);
}

}  // namespace lrn
