#pragma once

#include <stdexcept>
#include <string>

namespace lrn {

// Shape or contract violation: mismatched tensor dims, incompatible configs.
struct dim_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed byte stream (netpbm, checkpoint). Messages carry a byte offset
// where one is known.
struct codec_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid data values: labels out of range, empty datasets, non-finite input.
struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. backward called without a retained forward trace.
struct usage_error : std::logic_error {
  using std::logic_error::logic_error;
};

}  // namespace lrn
