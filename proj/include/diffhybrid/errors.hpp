#pragma once

#include <stdexcept>
#include <string>

namespace diffhybrid {

/// Invalid configuration or invalid call arguments (bad shapes, bad options).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation produced a non-finite value or otherwise diverged.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File-system or file-format failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace diffhybrid
