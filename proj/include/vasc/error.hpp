#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace vasc {

/// Category of a failure. Tests and the CLI branch on the kind, never on the
/// message text.
enum class ErrorKind {
  Schema,
  Ambiguity,
  UnmappedLabel,
  EmptyManifest,
  CannotSplit,
  InfeasibleFold,
  Range,
  Parameter,
  EmptyClass,
  Channel,
  Configuration,
  Shape,
  Training,
  Export,
  Load,
  DegenerateInput,
  InsufficientData,
  UndefinedMetric,
  Shortfall,
  Conflict,
  Sequencing,
  Validation,
  Idempotency,
  NoMoreItems,
  IncompleteSession,
  NotFound,
  Io,
  UnknownCommand,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace vasc
