#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace equity {

enum class ErrorKind {
  kInvalidArgument,
  kUnsupportedFormat,
  kParseError,
  kInvalidTransform,
  kIllegalState,
  kConstraintViolation,
  kInvalidSolution,
  kInvalidConfig,
  kInfeasibleInstance,
  kBudgetExceeded,
  kTrainingFault,
  kIoError,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidArgument: return "invalid-argument";
    case ErrorKind::kUnsupportedFormat: return "unsupported-format";
    case ErrorKind::kParseError: return "parse-error";
    case ErrorKind::kInvalidTransform: return "invalid-transform";
    case ErrorKind::kIllegalState: return "illegal-state";
    case ErrorKind::kConstraintViolation: return "constraint-violation";
    case ErrorKind::kInvalidSolution: return "invalid-solution";
    case ErrorKind::kInvalidConfig: return "invalid-config";
    case ErrorKind::kInfeasibleInstance: return "infeasible-instance";
    case ErrorKind::kBudgetExceeded: return "budget-exceeded";
    case ErrorKind::kTrainingFault: return "training-fault";
    case ErrorKind::kIoError: return "io-error";
  }
  return "unknown";
}

// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace equity
