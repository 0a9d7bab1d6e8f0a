#pragma once

#include <cstdint>
#include <vector>

#include "lrn/error.hpp"

namespace lrn {

// Label value excluded from losses, class frequencies and metrics.
inline constexpr std::uint8_t kIgnoreLabel = 255;

// 2-D grid of class indices (0..C-1) or kIgnoreLabel.
struct LabelMap {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> v;

  LabelMap() = default;
  LabelMap(int h_, int w_, std::uint8_t value = 0) : h(h_), w(w_) {
    if (h_ < 1 || w_ < 1) throw dim_error("label map dims must be >= 1");
    v.assign(static_cast<std::size_t>(h_) * w_, value);
  }

  std::uint8_t& at(int y, int x) { return v[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return v[static_cast<std::size_t>(y) * w + x]; }

  bool operator==(const LabelMap&) const = default;
};

}  // namespace lrn
