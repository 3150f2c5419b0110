#pragma once

#include <stdexcept>
#include <string>

namespace gppcast {

// Every error the library raises derives from Error. The CLI maps the
// concrete type onto its exit-code contract (see exit_code()).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Input data that violates the documented schema or a precondition.
class DataError : public Error {
 public:
  using Error::Error;
};

// Incompatible array shapes while building or binding a graph.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf produced by a computation, or training divergence.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Unreadable or unwritable files.
class IoError : public Error {
 public:
  using Error::Error;
};

inline int exit_code(const Error& e) {
  if (dynamic_cast<const NumericError*>(&e) != nullptr) return 3;
  if (dynamic_cast<const IoError*>(&e) != nullptr) return 4;
  return 2;
}

}  // namespace gppcast
