#pragma once

#include <stdexcept>
#include <string>

namespace vitplast {

// Base of every error thrown by the library. Callers that only want to
// report and exit can catch this one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree (matmul inner dims, image vs config, ...).
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file, bad magic, unsupported dtype.
class FormatError : public Error {
 public:
  using Error::Error;
};

// A bound was requested outside the hypotheses it is stated under.
class AssumptionError : public Error {
 public:
  using Error::Error;
};

// Input pair that makes a ratio undefined (u == v, x == y).
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

// Dataset-level problems: empty split, label out of range, too few pairs.
class DataError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf surfaced in a gradient or loss.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace vitplast
