#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace vemkd {

/// Invalid or inconsistent configuration (maps to CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition (shape mismatch, bad mask, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Non-finite values encountered in a numerical routine (exit code 3).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Langevin chain produced a non-finite gradient at `step()`.
class SamplerDivergence : public NumericalError {
 public:
  SamplerDivergence(int step, const std::string& what)
      : NumericalError(what + " (at Langevin step " + std::to_string(step) + ")"), step_(step) {}
  int step() const noexcept { return step_; }

 private:
  int step_;
};

/// File system failures (exit code 4).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// On-disk data does not match its manifest checksum.
class DataIntegrityError : public IoError {
 public:
  using IoError::IoError;
};

/// Operation not available in the configured training mode.
class ModeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Trainer steps executed out of order.
class SequencingError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace vemkd
