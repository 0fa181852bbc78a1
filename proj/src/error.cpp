#include "vasc/error.hpp"

namespace vasc {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Schema: return "schema";
    case ErrorKind::Ambiguity: return "ambiguity";
    case ErrorKind::UnmappedLabel: return "unmapped-label";
    case ErrorKind::EmptyManifest: return "empty-manifest";
    case ErrorKind::CannotSplit: return "cannot-split";
    case ErrorKind::InfeasibleFold: return "infeasible-fold";
    case ErrorKind::Range: return "range";
    case ErrorKind::Parameter: return "parameter";
    case ErrorKind::EmptyClass: return "empty-class";
    case ErrorKind::Channel: return "channel";
    case ErrorKind::Configuration: return "configuration";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::Training: return "training";
    case ErrorKind::Export: return "export";
    case ErrorKind::Load: return "load";
    case ErrorKind::DegenerateInput: return "degenerate-input";
    case ErrorKind::InsufficientData: return "insufficient-data";
    case ErrorKind::UndefinedMetric: return "undefined-metric";
    case ErrorKind::Shortfall: return "shortfall";
    case ErrorKind::Conflict: return "conflict";
    case ErrorKind::Sequencing: return "sequencing";
    case ErrorKind::Validation: return "validation";
    case ErrorKind::Idempotency: return "idempotency";
    case ErrorKind::NoMoreItems: return "no-more-items";
    case ErrorKind::IncompleteSession: return "incomplete-session";
    case ErrorKind::NotFound: return "not-found";
    case ErrorKind::Io: return "io";
    case ErrorKind::UnknownCommand: return "unknown-command";
  }
  return "unknown";
}

}  // namespace vasc
