#pragma once

#include <stdexcept>
#include <string>

namespace shiftlab {

// Exception hierarchy. Each maps onto one CLI exit code (see experiment.hpp).

/// Invalid configuration value or unknown enum name.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Precondition violated by the caller (wrong dimensions, empty inputs, ...).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed or inconsistent persisted data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Filesystem failures.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite loss or gradient during optimisation.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace shiftlab
