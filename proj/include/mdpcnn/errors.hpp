#pragma once

#include <stdexcept>
#include <string>

namespace mdpcnn {

// Bad shapes, bad settings, bad files: the caller asked for something
// that can never work.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// The API was driven out of contract (wrong call order, wrong argument
// for an otherwise valid configuration).
struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

// Numerical trouble detected at runtime (non-finite loss, NaN input).
struct DiagnosticError : std::runtime_error {
  explicit DiagnosticError(const std::string& msg) : std::runtime_error(msg) {}
};

// Filesystem / format trouble.
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mdpcnn
