#include "cvlab/error.hpp"

namespace cvlab {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::InvalidModel: return "InvalidModel";
    case ErrorKind::NonLatticeIncrements: return "NonLatticeIncrements";
    case ErrorKind::HorizonExceeded: return "HorizonExceeded";
    case ErrorKind::BetaOutOfRange: return "BetaOutOfRange";
    case ErrorKind::EmptyPath: return "EmptyPath";
    case ErrorKind::TruncationTooSmall: return "TruncationTooSmall";
    case ErrorKind::NotIrreducible: return "NotIrreducible";
    case ErrorKind::NonConvergence: return "NonConvergence";
    case ErrorKind::TiltOverflow: return "TiltOverflow";
    case ErrorKind::ZeroDenominator: return "ZeroDenominator";
    case ErrorKind::ResolventDivergent: return "ResolventDivergent";
    case ErrorKind::SingularSystem: return "SingularSystem";
    case ErrorKind::OutOfDualRange: return "OutOfDualRange";
    case ErrorKind::DegenerateControl: return "DegenerateControl";
    case ErrorKind::BudgetExceeded: return "BudgetExceeded";
    case ErrorKind::NonLatticeObservable: return "NonLatticeObservable";
    case ErrorKind::ZeroProbability: return "ZeroProbability";
  }
  return "Unknown";
}

}  // namespace cvlab
