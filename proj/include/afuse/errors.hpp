#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace afuse {

/// Malformed input: bad shapes, unknown names, invalid configs. CLI exit status 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A run produced a non-finite loss or parameter. CLI exit status 2.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A training phase diverged; carries the loss history up to the failure.
class DivergenceError : public NumericalError {
 public:
  DivergenceError(const std::string& phase, std::vector<double> history)
      : NumericalError(phase + ": loss became non-finite after " + std::to_string(history.size()) + " steps"),
        phase_(phase),
        history_(std::move(history)) {}

  const std::string& phase() const { return phase_; }
  const std::vector<double>& history() const { return history_; }

 private:
  std::string phase_;
  std::vector<double> history_;
};

}  // namespace afuse
