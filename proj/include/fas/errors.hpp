// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace fas {

/// Shape disagreement between operands or between a layer and its input.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A value outside the range an operation accepts (lo >= hi, lambda <= 0, ...).
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DecodeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IntegrityError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tape misuse: a node referring to an id that does not exist yet.
struct InternalError : std::logic_error {
  using std::logic_error::logic_error;
};

struct SimulationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Wraps an error raised inside one pipeline stage with the stage name.
struct StageError : std::runtime_error {
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace fas
