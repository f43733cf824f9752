#pragma once

#include <stdexcept>
#include <string>

namespace evasim {

// Invalid parameters or configuration values.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed input data (corpus files, dataset files, checkpoints).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite losses or other numerical breakdown during training.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// API misuse, e.g. backward() without a retained forward pass.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace evasim
