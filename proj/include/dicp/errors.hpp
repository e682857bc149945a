#pragma once

#include <stdexcept>
#include <string>

namespace dicp {

/// Invalid or inconsistent configuration (malformed task, bad planner sizes,
/// checkpoint/config mismatch).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An API was called out of order, e.g. stepping an environment after its
/// episode finished.
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed data: vocabulary violations, empty loss masks, corrupt files.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values in activations, losses or gradients.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GradientCheckError : public NumericError {
 public:
  GradientCheckError(std::string tensor, double relative_error)
      : NumericError("gradient check failed for tensor '" + tensor +
                     "' (relative error " + std::to_string(relative_error) + ")"),
        tensor_(std::move(tensor)),
        relative_error_(relative_error) {}

  const std::string& tensor() const noexcept { return tensor_; }
  double relative_error() const noexcept { return relative_error_; }

 private:
  std::string tensor_;
  double relative_error_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dicp
