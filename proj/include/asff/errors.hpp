#pragma once

#include <stdexcept>
#include <string>

namespace asff {

// Base for every error the library raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape mismatch. `axis()` names the offending axis ("N", "C", "H", "W",
// or a free-form description such as "sources").
class DimensionError : public Error {
 public:
  DimensionError(std::string op, std::string axis, const std::string& detail)
      : Error(op + ": dimension mismatch on axis " + axis + ": " + detail),
        op_(std::move(op)),
        axis_(std::move(axis)) {}

  const std::string& op() const noexcept { return op_; }
  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string op_;
  std::string axis_;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ConfigurationError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

// Malformed checkpoint or data file.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace asff
