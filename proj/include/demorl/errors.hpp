#pragma once

#include <stdexcept>
#include <string>

namespace demorl {

/// Input that violates an operation's preconditions (shape mismatch, bad state, bad file).
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A gradient, loss or parameter went non-finite; the update was refused.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Configuration that cannot be run (inconsistent mode flags, missing demos, unknown keys).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace demorl
