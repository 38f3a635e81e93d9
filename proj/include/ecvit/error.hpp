#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace ecvit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes; the message names every shape involved.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A length that must split evenly does not (token counts, partitions, pooling).
class DivisibilityError : public Error {
 public:
  using Error::Error;
};

/// Invalid model or layer configuration. Holds every violation found.
class ConfigError : public Error {
 public:
  explicit ConfigError(std::vector<std::string> violations);
  explicit ConfigError(const std::string& violation)
      : ConfigError(std::vector<std::string>{violation}) {}

  const std::vector<std::string>& violations() const { return violations_; }

 private:
  std::vector<std::string> violations_;
};

/// Caller broke an operation's precondition (non-scalar loss, missing gradient, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed input file (CIFAR binaries, config text).
class FormatError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  enum class Kind {
    kIo,
    kBadMagic,
    kVersionMismatch,
    kTruncated,
    kBadDtype,
    kNameMismatch,
    kConfigConflict,
  };

  CheckpointError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Raised when the training loss stops being finite.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::int64_t step, const std::string& what) : Error(what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

}  // namespace ecvit
