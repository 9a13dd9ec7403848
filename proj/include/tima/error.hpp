#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace tima {

enum class ErrorCode {
  // tensor_core
  ShapeMismatch,
  NonFinite,
  DegenerateRow,
  InvalidTemperature,
  NonScalarLoss,
  // model
  InvalidConfig,
  // losses
  NotNormalized,
  TooFewClasses,
  InvalidEta,
  InvalidWeights,
  LabelOutOfRange,
  // attacks / harness
  EmptyDataset,
  InvalidVariant,
  // data / io
  InvalidSpec,
  BadMagic,
  TruncatedFile,
  UnsupportedVersion,
  IoFailure,
  Schema,
  // config
  UnknownKey,
  TypeError,
  RangeError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::DegenerateRow: return "DegenerateRow";
    case ErrorCode::InvalidTemperature: return "InvalidTemperature";
    case ErrorCode::NonScalarLoss: return "NonScalarLoss";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::NotNormalized: return "NotNormalized";
    case ErrorCode::TooFewClasses: return "TooFewClasses";
    case ErrorCode::InvalidEta: return "InvalidEta";
    case ErrorCode::InvalidWeights: return "InvalidWeights";
    case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::InvalidVariant: return "InvalidVariant";
    case ErrorCode::InvalidSpec: return "InvalidSpec";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::TruncatedFile: return "TruncatedFile";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::Schema: return "Schema";
    case ErrorCode::UnknownKey: return "UnknownKey";
    case ErrorCode::TypeError: return "TypeError";
    case ErrorCode::RangeError: return "RangeError";
  }
  return "Unknown";
}

/// Every failure in the library is reported as a tima::Error carrying a
/// machine-checkable code next to the human-readable message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace tima
