// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace danet {

/// Operand extents do not agree with an operation's contract.
class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// A scalar argument is outside its admissible range.
class ParameterError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// Misuse of the autodiff machinery (non-scalar loss, foreign tape, ...).
class ContractError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Raised by the training loop when a loss term becomes NaN/Inf.
class TrainingAborted : public std::runtime_error {
public:
  TrainingAborted(std::string term, long step, double value)
      : std::runtime_error("non-finite loss term '" + term + "' at step " + std::to_string(step) +
                           " (value " + std::to_string(value) + ")"),
        term_(std::move(term)), step_(step) {}

  const std::string& term() const noexcept { return term_; }
  long step() const noexcept { return step_; }

private:
  std::string term_;
  long step_;
};

} // namespace danet
