#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sani {

enum class ErrorCode {
  EmptyCorpus,
  EmptyBlacklist,
  ConfigError,
  IoError,
  ShapeMismatch,
  NonFiniteValue,
  NotScalarLoss,
  SequenceTooLong,
  FormatVersionMismatch,
  CorruptFile,
  EmptyDocument,
  NoMaskableTokens,
  SchemeVariantMismatch,
  FractionOutOfRange,
  ZeroDenominator,
  EmptyHeldout,
  EmptyLabeledSet,
  MissingClass,
  IncompleteRuns,
};

std::string_view to_string(ErrorCode code);

/// Every failure the library reports carries one of the codes above so that
/// callers (and the CLI exit-code mapping) can branch on the kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::EmptyCorpus: return "EmptyCorpus";
    case ErrorCode::EmptyBlacklist: return "EmptyBlacklist";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFiniteValue: return "NonFiniteValue";
    case ErrorCode::NotScalarLoss: return "NotScalarLoss";
    case ErrorCode::SequenceTooLong: return "SequenceTooLong";
    case ErrorCode::FormatVersionMismatch: return "FormatVersionMismatch";
    case ErrorCode::CorruptFile: return "CorruptFile";
    case ErrorCode::EmptyDocument: return "EmptyDocument";
    case ErrorCode::NoMaskableTokens: return "NoMaskableTokens";
    case ErrorCode::SchemeVariantMismatch: return "SchemeVariantMismatch";
    case ErrorCode::FractionOutOfRange: return "FractionOutOfRange";
    case ErrorCode::ZeroDenominator: return "ZeroDenominator";
    case ErrorCode::EmptyHeldout: return "EmptyHeldout";
    case ErrorCode::EmptyLabeledSet: return "EmptyLabeledSet";
    case ErrorCode::MissingClass: return "MissingClass";
    case ErrorCode::IncompleteRuns: return "IncompleteRuns";
  }
  return "Unknown";
}

}  // namespace sani
