#pragma once

#include <stdexcept>
#include <string>

namespace pfa {

// Base of every error thrown by the library. The CLI maps subclasses onto
// exit codes, so keep the hierarchy flat.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents or channel counts that do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A window, crop or tiling that does not fit the data it is applied to.
class GeometryError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameters or configuration files.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Inputs that are well-formed but violate a domain rule.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace pfa
