#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sbn {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PatternError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PackError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when an op produces NaN or Inf. Carries the op name and the training
// step that was active (0 outside of training).
class NumericFault : public std::runtime_error {
 public:
  NumericFault(std::string op, std::int64_t step)
      : std::runtime_error("non-finite value produced by '" + op + "' at step " +
                           std::to_string(step)),
        op_(std::move(op)),
        step_(step) {}

  const std::string& op() const noexcept { return op_; }
  std::int64_t step() const noexcept { return step_; }

 private:
  std::string op_;
  std::int64_t step_;
};

}  // namespace sbn
