#pragma once

#include <stdexcept>
#include <string>

#include "dseq/config.hpp"

DSEQ_BEGIN_NAMESPACE

/// Base class for every domain error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor operands with incompatible shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN or infinity where a finite value is required.
class NonFiniteError : public Error {
 public:
  using Error::Error;
};

/// A file on disk is missing, truncated or malformed.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

DSEQ_END_NAMESPACE
