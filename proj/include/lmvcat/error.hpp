#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lmvcat {

enum class ErrorKind {
  DimensionMismatch,
  AllMaskedRow,
  NonScalarLoss,
  DoubleBackward,
  MissingFile,
  NonBinary,
  EmptyRowMask,
  InfeasibleRatio,
  DegenerateSplit,
  DegenerateMask,
  NoEvaluableSamples,
  NoEvaluableLabels,
  ShapeMismatch,
  NonFiniteLoss,
  InvalidArgument,
  ParseError,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::AllMaskedRow: return "AllMaskedRow";
    case ErrorKind::NonScalarLoss: return "NonScalarLoss";
    case ErrorKind::DoubleBackward: return "DoubleBackward";
    case ErrorKind::MissingFile: return "MissingFile";
    case ErrorKind::NonBinary: return "NonBinary";
    case ErrorKind::EmptyRowMask: return "EmptyRowMask";
    case ErrorKind::InfeasibleRatio: return "InfeasibleRatio";
    case ErrorKind::DegenerateSplit: return "DegenerateSplit";
    case ErrorKind::DegenerateMask: return "DegenerateMask";
    case ErrorKind::NoEvaluableSamples: return "NoEvaluableSamples";
    case ErrorKind::NoEvaluableLabels: return "NoEvaluableLabels";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::ParseError: return "ParseError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace lmvcat
