#include "essa/error.hpp"

namespace essa {

std::string_view to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kInvalidMatrix: return "InvalidMatrix";
    case ErrorCode::kDecompositionFailed: return "DecompositionFailed";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kNotDecomposed: return "NotDecomposed";
    case ErrorCode::kLayoutMismatch: return "LayoutMismatch";
    case ErrorCode::kInvalidCandidate: return "InvalidCandidate";
    case ErrorCode::kShapeError: return "ShapeError";
    case ErrorCode::kProtocolViolation: return "ProtocolViolation";
    case ErrorCode::kNumericalBreakdown: return "NumericalBreakdown";
    case ErrorCode::kIncompleteGeneration: return "IncompleteGeneration";
    case ErrorCode::kCorruptCheckpoint: return "CorruptCheckpoint";
    case ErrorCode::kAdapterMismatch: return "AdapterMismatch";
    case ErrorCode::kTrainingDiverged: return "TrainingDiverged";
    case ErrorCode::kAlreadyQuantized: return "AlreadyQuantized";
    case ErrorCode::kInvalidCluster: return "InvalidCluster";
    case ErrorCode::kGenerationFailed: return "GenerationFailed";
    case ErrorCode::kConfigMismatch: return "ConfigMismatch";
    case ErrorCode::kJobError: return "JobError";
    case ErrorCode::kSplitOverlap: return "SplitOverlap";
    case ErrorCode::kCorruptFrame: return "CorruptFrame";
    case ErrorCode::kTransportError: return "TransportError";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

int exit_code_for(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kInvalidConfig:
    case ErrorCode::kInvalidCluster:
    case ErrorCode::kConfigMismatch:
    case ErrorCode::kSplitOverlap:
    case ErrorCode::kLayoutMismatch:
    case ErrorCode::kAdapterMismatch:
    case ErrorCode::kNotDecomposed:
    case ErrorCode::kAlreadyQuantized:
    case ErrorCode::kShapeError:
    case ErrorCode::kCorruptCheckpoint:
    case ErrorCode::kIoError:
      return 2;
    case ErrorCode::kInvalidMatrix:
    case ErrorCode::kDecompositionFailed:
    case ErrorCode::kInvalidCandidate:
    case ErrorCode::kNumericalBreakdown:
    case ErrorCode::kTrainingDiverged:
      return 3;
    case ErrorCode::kProtocolViolation:
    case ErrorCode::kIncompleteGeneration:
    case ErrorCode::kGenerationFailed:
    case ErrorCode::kJobError:
    case ErrorCode::kCorruptFrame:
    case ErrorCode::kTransportError:
      return 4;
  }
  return 1;
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

}  // namespace essa
