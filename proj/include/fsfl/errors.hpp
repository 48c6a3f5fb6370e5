#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fsfl {

/// Invalid argument value or shape (bad node count, mismatched grids, ...).
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Input outside the mathematical domain of an operation (disconnected graph,
/// nonpositive KL argument).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Violation of the synchronous exchange protocol between devices.
class ProtocolError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Numeric breakdown during a run (overflow, NaN).
class NumericError : public std::runtime_error {
 public:
  NumericError(const std::string& what, std::size_t epoch)
      : std::runtime_error(what + " (epoch " + std::to_string(epoch) + ")"), epoch_(epoch) {}
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  std::size_t epoch_;
};

/// Malformed binary or text input. `offset` is the byte position of the fault.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace fsfl
