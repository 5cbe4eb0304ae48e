#pragma once

#include <stdexcept>
#include <string>

namespace driftadapt {

// Shape or size mismatch between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Real tensor where complex was required, or vice versa.
class DTypeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Non-finite values, divergence, or a solver that cannot make progress.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed files, missing checkpoints, bad spec documents.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace driftadapt
