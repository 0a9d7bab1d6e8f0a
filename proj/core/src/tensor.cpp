#include "lrn/tensor.hpp"

namespace lrn {

std::string to_string(const Dims4& d) {
  return "(" + std::to_string(d.n) + "," + std::to_string(d.c) + "," +
         std::to_string(d.h) + "," + std::to_string(d.w) + ")";
}

}  // namespace lrn
