#pragma once

#include <stdexcept>
#include <string>

namespace cvlab {

enum class ErrorKind {
  InvalidArgument,
  ConfigError,
  InvalidModel,
  NonLatticeIncrements,
  HorizonExceeded,
  BetaOutOfRange,
  EmptyPath,
  TruncationTooSmall,
  NotIrreducible,
  NonConvergence,
  TiltOverflow,
  ZeroDenominator,
  ResolventDivergent,
  SingularSystem,
  OutOfDualRange,
  DegenerateControl,
  BudgetExceeded,
  NonLatticeObservable,
  ZeroProbability,
};

const char* to_string(ErrorKind kind) noexcept;

/// Every failure raised by the library carries a kind so that the CLI can
/// map it onto its exit-code contract.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace cvlab
