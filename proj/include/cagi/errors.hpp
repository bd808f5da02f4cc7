#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cagi {

inline constexpr int kExitConfigError = 2;
inline constexpr int kExitNumericalError = 3;
inline constexpr int kExitIoError = 4;

/// A caller broke a documented precondition (shape mismatch, bad length, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Invalid or unresolvable configuration. Maps to CLI exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values or a run that blew up. Maps to CLI exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& what, std::size_t iteration)
      : NumericalError(what + " (iteration " + std::to_string(iteration) + ")"),
        iteration_(iteration) {}

  std::size_t iteration() const noexcept { return iteration_; }

 private:
  std::size_t iteration_;
};

/// A signal with zero energy cannot be scaled to meet the power constraint.
class DegenerateSignalError : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

/// Report or config file could not be read/written. Maps to CLI exit code 4.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cagi
