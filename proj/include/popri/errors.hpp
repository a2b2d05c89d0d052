#pragma once

#include <stdexcept>
#include <string>

namespace popri {

// Base class for all errors raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Invalid or inconsistent configuration detected before any work starts.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what) {}
};

// Malformed input file; carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, long line)
      : Error("parse error (line " + std::to_string(line) + "): " + what), line_(line) {}
  explicit ParseError(const std::string& what) : Error("parse error: " + what), line_(0) {}
  long line() const { return line_; }

 private:
  long line_;
};

// Token id outside the declared vocabulary.
class InvalidTokenError : public Error {
 public:
  explicit InvalidTokenError(const std::string& what) : Error("invalid token: " + what) {}
};

// Zero-norm embedding where a direction is required.
class DegenerateEmbeddingError : public Error {
 public:
  explicit DegenerateEmbeddingError(const std::string& what)
      : Error("degenerate embedding: " + what) {}
};

// Vector dimensions do not agree.
class DimensionMismatchError : public Error {
 public:
  explicit DimensionMismatchError(const std::string& what)
      : Error("dimension mismatch: " + what) {}
};

// Noise calibration could not reach the target within the search bracket.
class CalibrationError : public Error {
 public:
  explicit CalibrationError(const std::string& what) : Error("calibration error: " + what) {}
};

// Non-finite value where the computation cannot continue.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric error: " + what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io error: " + what) {}
};

}  // namespace popri
