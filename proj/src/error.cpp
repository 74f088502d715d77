#include "ocrlens/error.hpp"

namespace ocrlens {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::NonSymmetric: return "NonSymmetric";
    case ErrorCode::NonFinite: return "NonFinite";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::DegenerateData: return "DegenerateData";
    case ErrorCode::KOutOfRange: return "KOutOfRange";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::InconsistentManifest: return "InconsistentManifest";
    case ErrorCode::SinkFailure: return "SinkFailure";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::VersionUnsupported: return "VersionUnsupported";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::InvalidRecord: return "InvalidRecord";
    case ErrorCode::ConfigInvalid: return "ConfigInvalid";
    case ErrorCode::SceneInvalid: return "SceneInvalid";
    case ErrorCode::HookLayerOutOfRange: return "HookLayerOutOfRange";
    case ErrorCode::LayerNotCaptured: return "LayerNotCaptured";
    case ErrorCode::NoAlignedPositions: return "NoAlignedPositions";
    case ErrorCode::ModelMismatch: return "ModelMismatch";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::RangeError: return "RangeError";
    case ErrorCode::NTooLarge: return "NTooLarge";
    case ErrorCode::MissingDirections: return "MissingDirections";
    case ErrorCode::HeadOutOfRange: return "HeadOutOfRange";
    case ErrorCode::EmptyEvalSet: return "EmptyEvalSet";
    case ErrorCode::MixedTasks: return "MixedTasks";
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::OverlappingMasks: return "OverlappingMasks";
    case ErrorCode::NoTextScenes: return "NoTextScenes";
    case ErrorCode::SplitLeakage: return "SplitLeakage";
    case ErrorCode::IoFailure: return "IoFailure";
  }
  return "Unknown";
}

bool is_io_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::SinkFailure:
    case ErrorCode::Truncated:
    case ErrorCode::IoFailure:
      return true;
    default:
      return false;
  }
}

}  // namespace ocrlens
