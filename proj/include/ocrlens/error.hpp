#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ocrlens {

enum class ErrorCode {
  // tensor core
  NonSymmetric,
  NonFinite,
  TooFewSamples,
  DegenerateData,
  KOutOfRange,
  DimensionMismatch,
  // activation store / direction files
  InconsistentManifest,
  SinkFailure,
  BadMagic,
  VersionUnsupported,
  ChecksumMismatch,
  Truncated,
  InvalidRecord,
  // toy model
  ConfigInvalid,
  SceneInvalid,
  HookLayerOutOfRange,
  // delta pca
  LayerNotCaptured,
  NoAlignedPositions,
  ModelMismatch,
  // interventions
  ParseError,
  RangeError,
  NTooLarge,
  MissingDirections,
  HeadOutOfRange,
  // evaluation
  EmptyEvalSet,
  MixedTasks,
  EmptyMask,
  OverlappingMasks,
  NoTextScenes,
  // orchestration
  SplitLeakage,
  IoFailure,
};

std::string_view to_string(ErrorCode code);

// I/O failures map to CLI exit code 3, everything else is a validation error.
bool is_io_error(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Raised by the intervention grammar; position is a 0-based byte offset.
class SpecParseError : public Error {
 public:
  SpecParseError(ErrorCode code, std::size_t position, const std::string& message)
      : Error(code, message + " (at position " + std::to_string(position) + ")"),
        position_(position) {}

  std::size_t position() const noexcept { return position_; }

 private:
  std::size_t position_;
};

}  // namespace ocrlens
