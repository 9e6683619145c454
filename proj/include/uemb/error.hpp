#pragma once

#include <stdexcept>
#include <string>

namespace uemb {

/// Base of every error the engine raises.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Zero-norm vectors, empty inputs and other values a kernel cannot work with.
class DegenerateInputError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Bad configuration, manifest or command input.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Filesystem and stream failures.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace uemb
