#pragma once

#include <stdexcept>
#include <string>

namespace rulmae {

enum class ErrorCode {
  MalformedLine,
  NonContiguousCycles,
  InvalidRange,
  EmptyDataset,
  UnknownFeature,
  UnitTooShort,
  BadPatchSize,
  BadRatio,
  ShapeMismatch,
  NonFinite,
  BadHeadCount,
  BadDim,
  IndexOverlap,
  EmptyInput,
  AllMasked,
  MissingLabels,
  NonFiniteLoss,
  VersionMismatch,
  CorruptFile,
  MissingTruth,
  IoError,
};

const char* error_code_name(ErrorCode code);

// Domain error carrying a machine-checkable code plus a human message.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace rulmae
