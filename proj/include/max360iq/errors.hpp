#pragma once

#include <stdexcept>
#include <string>

namespace max360iq {

// Shape or argument contract violated by the caller.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced by an op, or a numerically degenerate input.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Constant score vector where a spread is required (loss normalization, correlations).
class DegenerateInputError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Malformed or missing dataset files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace max360iq
