#pragma once

#include <stdexcept>
#include <string>

namespace langseg {

// Base of every error raised by the library. Each subclass maps to one
// CLI exit code and one HTTP status.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible array shapes or image dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// A label that the embedding table cannot resolve.
class UnknownLabelError : public Error {
 public:
  explicit UnknownLabelError(std::string label)
      : Error("unknown label '" + label + "'"), label_(std::move(label)) {}
  const std::string& label() const { return label_; }

 private:
  std::string label_;
};

// Malformed file contents (bad magic, truncation, dimension mismatch).
class FormatError : public Error {
 public:
  using Error::Error;
};

class MagicMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

class DimensionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

// Filesystem or network failures.
class IoError : public Error {
 public:
  using Error::Error;
};

// Inputs that are well-formed but violate a documented invariant.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace langseg
