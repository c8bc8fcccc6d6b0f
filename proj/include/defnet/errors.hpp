#pragma once

#include <stdexcept>
#include <string>

namespace defnet {

// Shape of an operand does not compose with the operation.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// A scalar argument (kernel size, stride, label, fraction, ...) is out of range.
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// On-disk data does not match the expected byte format.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A layer/pooling configuration cannot be applied to the given map.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Every candidate offset at some anchor was excluded (out of bounds or infinite penalty).
struct DegeneratePenaltyError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A dataset specification cannot be realized (geometry does not fit, empty split, ...).
struct SpecError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

}  // namespace defnet
