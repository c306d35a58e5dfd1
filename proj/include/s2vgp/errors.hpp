// SPDX-License-Identifier: Apache-2.0

#ifndef S2VGP_ERRORS_HPP_
#define S2VGP_ERRORS_HPP_

#include <cstddef>
#include <stdexcept>
#include <string>

namespace s2vgp {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Linear algebra.
class NotPositiveDefinite : public Error {
 public:
  using Error::Error;
};
class SingularFactor : public Error {
 public:
  using Error::Error;
};
class InconsistentBand : public Error {
 public:
  using Error::Error;
};
class ShapeMismatch : public Error {
 public:
  using Error::Error;
};
class DowndateFailure : public Error {
 public:
  using Error::Error;
};

// Model construction.
class InvalidHyperparameter : public Error {
 public:
  using Error::Error;
};
class NegativeGap : public Error {
 public:
  using Error::Error;
};
class DegenerateInducingInputs : public Error {
 public:
  using Error::Error;
};
class InvalidObservation : public Error {
 public:
  using Error::Error;
};

// Optimization.
class StepRejected : public Error {
 public:
  using Error::Error;
};

// Data and configuration plumbing.
class ParseError : public Error {
 public:
  ParseError(std::size_t row, std::size_t col, const std::string& what)
      : Error("parse error at row " + std::to_string(row) + ", column " +
              std::to_string(col) + ": " + what),
        row_(row),
        col_(col) {}
  std::size_t row() const noexcept { return row_; }
  std::size_t col() const noexcept { return col_; }

 private:
  std::size_t row_;
  std::size_t col_;
};
class EmptyDataset : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace s2vgp

#endif  // S2VGP_ERRORS_HPP_
