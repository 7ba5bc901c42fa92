#pragma once

#include <stdexcept>
#include <string>

namespace mlcaps {

// Shape disagreement between operands of an op.
struct dimension_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Invalid model, schedule or routing configuration.
struct config_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed or truncated file (IDX, CIFAR, hierarchy, checkpoint, CSV).
struct format_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A non-finite value showed up where finite values are required.
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// An expected input file or directory is absent.
struct missing_data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mlcaps
